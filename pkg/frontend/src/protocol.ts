// Wire protocol: JSON text messages plus binary image frames.
// Byte layout must match docs/protocol.md exactly (big-endian).

export const PROTOCOL_MAGIC = 0x434e5331; // "CNS1"
export const KIND_MICROSCOPE = 2;
export const KIND_BSCAN = 3;
export const HEADER_BYTES = 37;

export interface ImageFrame {
  kind: number;
  seq: number;
  t: number;
  width: number;
  height: number;
  scale: number; // mm per pixel
  pixels: Uint8Array; // row-major grayscale
}

export function decodeFrame(buf: ArrayBuffer): ImageFrame {
  const view = new DataView(buf);
  if (buf.byteLength < HEADER_BYTES) {
    throw new Error(`frame too short: ${buf.byteLength} bytes`);
  }
  const magic = view.getUint32(0);
  if (magic !== PROTOCOL_MAGIC) {
    throw new Error(`bad magic 0x${magic.toString(16)}`);
  }
  const kind = view.getUint8(4);
  const seq = Number(view.getBigUint64(5));
  const t = view.getFloat64(13);
  const width = view.getUint16(21);
  const height = view.getUint16(23);
  const scale = view.getFloat64(25);
  const len = view.getUint32(33);
  if (buf.byteLength < HEADER_BYTES + len || len !== width * height) {
    throw new Error(`inconsistent payload: ${len} vs ${buf.byteLength - HEADER_BYTES}`);
  }
  return { kind, seq, t, width, height, scale, pixels: new Uint8Array(buf, HEADER_BYTES, len) };
}

export function encodeFrame(f: ImageFrame): ArrayBuffer {
  // used by tests to fabricate server frames byte-for-byte
  const buf = new ArrayBuffer(HEADER_BYTES + f.pixels.length);
  const view = new DataView(buf);
  view.setUint32(0, PROTOCOL_MAGIC);
  view.setUint8(4, f.kind);
  view.setBigUint64(5, BigInt(f.seq));
  view.setFloat64(13, f.t);
  view.setUint16(21, f.width);
  view.setUint16(23, f.height);
  view.setFloat64(25, f.scale);
  view.setUint32(33, f.pixels.length);
  new Uint8Array(buf, HEADER_BYTES).set(f.pixels);
  return buf;
}

// --- server JSON messages ----------------------------------------------------

export interface FsmStateMsg {
  kind: "fsm_state";
  seq: number;
  t: number;
  phase: string;
  mode: "auto" | "manual";
  started: boolean;
  attempts: number;
  navigation_s: number;
  puncture_s: number;
  verdict: number | null;
  abort_reason: string | null;
  note: string;
  tick: number;
  target_px?: [number, number];
}

export interface TrialResultMsg {
  kind: "trial_result";
  seq: number;
  t: number;
  verdict: number;
  ground_truth: number;
  gt_reason: string;
  outcome_class: string;
  navigation_s: number;
  puncture_s: number;
  attempts: number;
  abort_reason: string | null;
}

export interface HelloMsg {
  kind: "hello";
  seq: number;
  session: string;
  scenario_name: string;
  tick_rate_hz: number;
  snapshot: SnapshotDoc;
}

export interface SnapshotDoc {
  session: string;
  scenario_name: string;
  scenario_digest: string;
  fsm: Omit<FsmStateMsg, "kind" | "seq" | "t">;
  frame_seq: number;
  tick: number;
  t: number;
  trial_result?: TrialResultMsg;
}

export interface ErrorMsg { kind: "error"; seq: number; message: string }
export interface AckMsg { kind: "ack"; seq: number; acked: string; u?: number; v?: number }
export interface SnapshotMsg extends SnapshotDoc { kind: "snapshot"; seq: number }

export type ServerMsg = FsmStateMsg | TrialResultMsg | HelloMsg | ErrorMsg | AckMsg | SnapshotMsg;

// --- client commands ----------------------------------------------------------

export type KeyDirection = "+x" | "-x" | "+y" | "-y" | "+z" | "-z" | "+axial" | "-axial";

export type ClientCommand =
  | { kind: "set_target"; u: number; v: number; seq: number }
  | { kind: "set_mode"; mode: "auto" | "manual"; seq: number }
  | { kind: "key"; direction: KeyDirection; seq: number }
  | { kind: "start"; seq: number }
  | { kind: "abort"; seq: number }
  | { kind: "reset"; seq: number }
  | { kind: "snapshot"; seq: number };
