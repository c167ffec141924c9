// Page wiring: connect, route clicks/keys to commands, paint on rAF.

import { canvasToFrame } from "./coords.js";
import { KeyTracker } from "./input.js";
import { SessionClient, sessionUrl, SocketLike } from "./net.js";
import { HudElements, paint } from "./render.js";
import {
  initialState, reduce, reduceFrame, targetingAllowed, ViewState,
} from "./state.js";

const params = new URLSearchParams(window.location.search);
const host = params.get("host") ?? "127.0.0.1";
const port = parseInt(params.get("port") ?? "8765", 10);
let token = params.get("session");

const state: ViewState = initialState();
const keys = new KeyTracker();
let keyTimer: number | null = null;

function el(id: string): HTMLElement {
  const e = document.getElementById(id);
  if (!e) throw new Error(`missing element #${id}`);
  return e;
}

const hud: HudElements = {
  microscope: { canvas: el("microscope") as HTMLCanvasElement, staleBadge: el("mic-stale") },
  bscan: { canvas: el("bscan") as HTMLCanvasElement, staleBadge: el("bscan-stale") },
  phase: el("phase"), attempts: el("attempts"), timers: el("timers"),
  connection: el("connection"), modeButton: el("mode-toggle"),
  gapBadge: el("gap-badge"), timeline: el("timeline"),
  banner: el("banner"), toast: el("toast"), hint: el("hint"),
};

const client = new SessionClient(
  (url) => new WebSocket(url) as unknown as SocketLike,
  {
    onMessage: (msg) => {
      reduce(state, msg, Date.now());
      if (msg.kind === "hello") {
        token = msg.session;
        startKeyLoop(1000 / state.tickRateHz);
      }
    },
    onFrame: (frame) => reduceFrame(state, frame, Date.now()),
    onOpen: () => { state.connection = "open"; },
    onClose: () => {
      state.connection = "closed";
      // resume the same session after a pause; the hello snapshot restores state
      setTimeout(() => client.connect(sessionUrl(host, port, token)), 1000);
    },
    onDecodeError: () => { /* gap badge already reflects drops */ },
  },
);

function showHint(text: string): void {
  state.hint = text;
  setTimeout(() => { if (state.hint === text) state.hint = null; }, 1500);
}

hud.microscope.canvas.addEventListener("click", (ev: MouseEvent) => {
  const rect = hud.microscope.canvas.getBoundingClientRect();
  const mic = state.microscope;
  if (!mic) return;
  const mapping = {
    canvasW: rect.width, canvasH: rect.height,
    frameW: mic.frame.width, frameH: mic.frame.height,
  };
  const pt = canvasToFrame(ev.clientX - rect.left, ev.clientY - rect.top, mapping);
  if (!pt) {
    showHint("click inside the image");
    return;
  }
  if (!targetingAllowed(state)) {
    showHint(`targeting not allowed in ${state.phase}${state.mode === "manual" ? " (manual mode)" : ""}`);
    return;
  }
  state.pendingTargetPx = [pt[0], pt[1]];
  client.send({ kind: "set_target", u: pt[0], v: pt[1] });
});

document.addEventListener("keydown", (ev: KeyboardEvent) => {
  if (ev.repeat) return; // we do our own repeat, throttled to tick rate
  if (keys.keyDown(ev.code) !== null) {
    ev.preventDefault();
    if (state.mode !== "manual") showHint("keys drive the robot in manual mode only");
  }
});
document.addEventListener("keyup", (ev: KeyboardEvent) => keys.keyUp(ev.code));
window.addEventListener("blur", () => keys.releaseAll());

function startKeyLoop(periodMs: number): void {
  if (keyTimer !== null) clearInterval(keyTimer);
  keyTimer = window.setInterval(() => {
    const dir = keys.tick();
    if (dir !== null && state.mode === "manual") {
      client.send({ kind: "key", direction: dir });
    }
  }, periodMs);
}

el("start").addEventListener("click", () => client.send({ kind: "start" }));
el("abort").addEventListener("click", () => client.send({ kind: "abort" }));
el("reset").addEventListener("click", () => client.send({ kind: "reset" }));
el("mode-toggle").addEventListener("click", () => {
  client.send({ kind: "set_mode", mode: state.mode === "auto" ? "manual" : "auto" });
});

function frameLoop(): void {
  paint(state, hud, Date.now());
  requestAnimationFrame(frameLoop);
}

client.connect(sessionUrl(host, port, token));
requestAnimationFrame(frameLoop);
