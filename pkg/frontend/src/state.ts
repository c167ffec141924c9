// View state reducer. The UI holds no simulation truth of its own: every
// field here is derived from server messages, so a reconnect that applies
// the snapshot renders identically to a client that watched live.

import {
  ImageFrame, KIND_BSCAN, KIND_MICROSCOPE, ServerMsg, SnapshotDoc,
  TrialResultMsg,
} from "./protocol.js";

export const STALE_AFTER_MS = 2000;
export const TIMELINE_LIMIT = 200;

export interface FrameView {
  frame: ImageFrame;
  receivedAt: number; // wall clock ms, for stale marking only
}

export interface TimelineEntry {
  t: number;
  phase: string;
  note: string;
}

export interface ViewState {
  connection: "connecting" | "open" | "closed";
  session: string | null;
  tickRateHz: number;
  mode: "auto" | "manual";
  started: boolean;
  phase: string;
  attempts: number;
  navigationS: number;
  punctureS: number;
  note: string;
  targetPx: [number, number] | null;        // acknowledged by the server
  pendingTargetPx: [number, number] | null; // provisional until ack
  microscope: FrameView | null;
  bscan: FrameView | null;
  lastSeq: number;
  seqGaps: number;
  timeline: TimelineEntry[];
  result: TrialResultMsg | null;
  toast: string | null;
  hint: string | null; // local rejections (bad click, auto-mode key)
}

export function initialState(): ViewState {
  return {
    connection: "connecting", session: null, tickRateHz: 10,
    mode: "auto", started: false, phase: "Idle", attempts: 0,
    navigationS: 0, punctureS: 0, note: "",
    targetPx: null, pendingTargetPx: null,
    microscope: null, bscan: null,
    lastSeq: 0, seqGaps: 0, timeline: [], result: null,
    toast: null, hint: null,
  };
}

function trackSeq(s: ViewState, seq: number): void {
  if (s.lastSeq > 0 && seq > s.lastSeq + 1) {
    s.seqGaps += seq - s.lastSeq - 1; // dropped frames on a slow link
  }
  if (seq > s.lastSeq) s.lastSeq = seq;
}

function applyFsm(s: ViewState, fsm: SnapshotDoc["fsm"], t: number): void {
  if (fsm.phase !== s.phase) {
    s.timeline.push({ t, phase: fsm.phase, note: fsm.note ?? "" });
    if (s.timeline.length > TIMELINE_LIMIT) s.timeline.shift();
  }
  s.phase = fsm.phase;
  s.mode = fsm.mode;
  s.started = fsm.started;
  s.attempts = fsm.attempts;
  s.navigationS = fsm.navigation_s;
  s.punctureS = fsm.puncture_s;
  s.note = fsm.note ?? "";
  if (fsm.target_px) {
    s.targetPx = [fsm.target_px[0], fsm.target_px[1]];
    if (s.pendingTargetPx
        && Math.abs(s.pendingTargetPx[0] - s.targetPx[0]) < 1e-6
        && Math.abs(s.pendingTargetPx[1] - s.targetPx[1]) < 1e-6) {
      s.pendingTargetPx = null; // solidified
    }
  }
}

export function applySnapshot(s: ViewState, doc: SnapshotDoc): void {
  s.session = doc.session;
  applyFsm(s, doc.fsm, doc.t);
  if (doc.trial_result) s.result = doc.trial_result;
  if (doc.frame_seq > s.lastSeq) s.lastSeq = doc.frame_seq;
}

export function reduce(s: ViewState, msg: ServerMsg, now: number): ViewState {
  switch (msg.kind) {
    case "hello":
      s.connection = "open";
      s.session = msg.session;
      s.tickRateHz = msg.tick_rate_hz;
      applySnapshot(s, msg.snapshot);
      break;
    case "fsm_state":
      trackSeq(s, msg.seq);
      applyFsm(s, msg, msg.t);
      break;
    case "trial_result":
      trackSeq(s, msg.seq);
      s.result = msg;
      break;
    case "error":
      s.toast = msg.message;
      break;
    case "ack":
      if (msg.acked === "set_target" && msg.u !== undefined && msg.v !== undefined) {
        s.targetPx = [msg.u, msg.v];
        s.pendingTargetPx = null;
      }
      break;
    case "snapshot":
      applySnapshot(s, msg);
      break;
  }
  return s;
}

export function reduceFrame(s: ViewState, frame: ImageFrame, now: number): ViewState {
  trackSeq(s, frame.seq);
  const view: FrameView = { frame, receivedAt: now };
  if (frame.kind === KIND_MICROSCOPE) {
    if (!s.microscope || frame.seq > s.microscope.frame.seq) s.microscope = view;
  } else if (frame.kind === KIND_BSCAN) {
    if (!s.bscan || frame.seq > s.bscan.frame.seq) s.bscan = view;
  }
  return s;
}

export function isStale(view: FrameView | null, now: number): boolean {
  return view !== null && now - view.receivedAt > STALE_AFTER_MS;
}

export function targetingAllowed(s: ViewState): boolean {
  // pre-start clicks or re-targeting during navigation only
  return s.mode === "auto" && (s.phase === "Idle" || s.phase === "Navigating");
}
