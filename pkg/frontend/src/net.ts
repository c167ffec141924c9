// Session channel wrapper. The socket is injectable so tests can drive the
// client with a scripted stub instead of a live server.

import { ClientCommand, ServerMsg, decodeFrame, ImageFrame } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
  onmessage: ((ev: { data: string | ArrayBuffer }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientEvents {
  onMessage(msg: ServerMsg): void;
  onFrame(frame: ImageFrame): void;
  onOpen(): void;
  onClose(): void;
  onDecodeError(err: Error): void;
}

export function sessionUrl(host: string, port: number, token: string | null): string {
  const q = token ? `?session=${encodeURIComponent(token)}` : "";
  return `ws://${host}:${port}/${q}`;
}

type DistributiveOmit<T, K extends keyof never> = T extends unknown ? Omit<T, K> : never;
export type OutboundCommand = DistributiveOmit<ClientCommand, "seq">;

export class SessionClient {
  private socket: SocketLike | null = null;
  private seq = 0;
  sent: ClientCommand[] = []; // outbox log, 1:1 with user actions

  constructor(private factory: SocketFactory, private events: ClientEvents) {}

  connect(url: string): void {
    this.socket = this.factory(url);
    this.socket.onopen = () => this.events.onOpen();
    this.socket.onclose = () => this.events.onClose();
    this.socket.onmessage = (ev) => {
      if (typeof ev.data === "string") {
        let msg: ServerMsg;
        try {
          msg = JSON.parse(ev.data) as ServerMsg;
        } catch (e) {
          this.events.onDecodeError(e as Error);
          return;
        }
        this.events.onMessage(msg);
      } else {
        try {
          this.events.onFrame(decodeFrame(ev.data));
        } catch (e) {
          // malformed frame: drop it, the seq gap badge tells the story
          console.warn("dropped malformed frame:", (e as Error).message);
          this.events.onDecodeError(e as Error);
        }
      }
    };
  }

  send(cmd: OutboundCommand): ClientCommand {
    const full = { ...cmd, seq: ++this.seq } as ClientCommand;
    this.sent.push(full);
    this.socket?.send(JSON.stringify(full));
    return full;
  }

  close(): void {
    this.socket?.close();
    this.socket = null;
  }
}
