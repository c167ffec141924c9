// Keyboard teleoperation: held keys repeat at the sim tick rate, one Key
// command per tick, and when several direction keys are held the most
// recently pressed one wins.

import { KeyDirection } from "./protocol.js";

export const KEY_BINDINGS: Record<string, KeyDirection> = {
  ArrowRight: "+x", KeyD: "+x",
  ArrowLeft: "-x", KeyA: "-x",
  ArrowDown: "+y", KeyS: "+y",   // canvas rows grow downward = +y
  ArrowUp: "-y", KeyW: "-y",
  PageUp: "+z",
  PageDown: "-z",
  KeyI: "+axial",                // insert along the needle axis
  KeyK: "-axial",
};

export class KeyTracker {
  private held: KeyDirection[] = []; // press order, most recent last

  keyDown(code: string): KeyDirection | null {
    const dir = KEY_BINDINGS[code];
    if (!dir) return null;
    const i = this.held.indexOf(dir);
    if (i >= 0) this.held.splice(i, 1); // OS auto-repeat: refresh recency
    this.held.push(dir);
    return dir;
  }

  keyUp(code: string): void {
    const dir = KEY_BINDINGS[code];
    if (!dir) return;
    const i = this.held.indexOf(dir);
    if (i >= 0) this.held.splice(i, 1);
  }

  releaseAll(): void {
    this.held = [];
  }

  /** The command for this tick, or null when nothing is held. */
  tick(): KeyDirection | null {
    return this.held.length ? this.held[this.held.length - 1] : null;
  }
}
