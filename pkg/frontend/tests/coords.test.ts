import { describe, expect, it } from "vitest";
import { canvasToFrame, frameToCanvas, PanelMapping } from "../src/coords.js";

describe("canvas/frame coordinate mapping", () => {
  it("maps a frame-center click to the center pixel", () => {
    const m: PanelMapping = { canvasW: 512, canvasH: 512, frameW: 512, frameH: 512 };
    const pt = canvasToFrame(256, 256, m)!;
    expect(pt[0]).toBeCloseTo(256, 6);
    expect(pt[1]).toBeCloseTo(256, 6);
  });

  it("is invertible within one pixel at any zoom", () => {
    for (const zoom of [0.4, 0.75, 1.0, 1.37, 2.0, 3.3]) {
      const m: PanelMapping = { canvasW: 512 * zoom, canvasH: 512 * zoom, frameW: 512, frameH: 512 };
      for (const [u, v] of [[0, 0], [17.3, 400.9], [256, 256], [511, 511]] as const) {
        const [x, y] = frameToCanvas(u, v, m);
        const back = canvasToFrame(x, y, m)!;
        expect(Math.hypot(back[0] - u, back[1] - v)).toBeLessThanOrEqual(1.0);
      }
    }
  });

  it("resize keeps the same frame pixel for the same image point", () => {
    const small: PanelMapping = { canvasW: 256, canvasH: 256, frameW: 512, frameH: 512 };
    const big: PanelMapping = { canvasW: 1024, canvasH: 1024, frameW: 512, frameH: 512 };
    const before = canvasToFrame(128, 64, small)!; // same relative image point
    const after = canvasToFrame(512, 256, big)!;
    expect(before[0]).toBeCloseTo(after[0], 6);
    expect(before[1]).toBeCloseTo(after[1], 6);
  });

  it("rejects clicks outside the frame", () => {
    const m: PanelMapping = { canvasW: 512, canvasH: 512, frameW: 512, frameH: 512 };
    expect(canvasToFrame(-3, 10, m)).toBeNull();
    expect(canvasToFrame(10, 512, m)).toBeNull();
  });
});
