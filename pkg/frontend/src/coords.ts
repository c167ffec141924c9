// Canvas <-> frame pixel mapping. The canvas may be any size (CSS zoom,
// window resize); the mapping is a pure scale so it stays invertible
// within a pixel at any zoom.

export interface PanelMapping {
  canvasW: number;
  canvasH: number;
  frameW: number;
  frameH: number;
}

export function canvasToFrame(x: number, y: number, m: PanelMapping): [number, number] | null {
  const u = (x / m.canvasW) * m.frameW;
  const v = (y / m.canvasH) * m.frameH;
  if (u < 0 || v < 0 || u >= m.frameW || v >= m.frameH) return null;
  return [u, v];
}

export function frameToCanvas(u: number, v: number, m: PanelMapping): [number, number] {
  return [(u / m.frameW) * m.canvasW, (v / m.frameH) * m.canvasH];
}
