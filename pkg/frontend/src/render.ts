// Canvas painting and DOM overlays. Grayscale values map straight through
// (value -> rgb(v,v,v)), so the operator sees exactly the contrast the
// perception layer sees.

import { frameToCanvas, PanelMapping } from "./coords.js";
import { FrameView, isStale, ViewState } from "./state.js";

export interface PanelElements {
  canvas: HTMLCanvasElement;
  staleBadge: HTMLElement;
}

export interface HudElements {
  microscope: PanelElements;
  bscan: PanelElements;
  phase: HTMLElement;
  attempts: HTMLElement;
  timers: HTMLElement;
  connection: HTMLElement;
  modeButton: HTMLElement;
  gapBadge: HTMLElement;
  timeline: HTMLElement;
  banner: HTMLElement;
  toast: HTMLElement;
  hint: HTMLElement;
}

function paintFrame(view: FrameView | null, panel: PanelElements, now: number): PanelMapping | null {
  const ctx = panel.canvas.getContext("2d");
  if (!ctx || !view) return null;
  const { width, height, pixels } = view.frame;
  if (panel.canvas.width !== width) panel.canvas.width = width;
  if (panel.canvas.height !== height) panel.canvas.height = height;
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < pixels.length; i++) {
    const v = pixels[i];
    img.data[i * 4] = v;
    img.data[i * 4 + 1] = v;
    img.data[i * 4 + 2] = v;
    img.data[i * 4 + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
  panel.staleBadge.style.display = isStale(view, now) ? "inline" : "none";
  return { canvasW: width, canvasH: height, frameW: width, frameH: height };
}

function drawCrosshair(ctx: CanvasRenderingContext2D, x: number, y: number,
                       color: string, dashed: boolean): void {
  ctx.save();
  ctx.strokeStyle = color;
  ctx.lineWidth = 1;
  if (dashed) ctx.setLineDash([4, 3]);
  ctx.beginPath();
  ctx.moveTo(x - 10, y); ctx.lineTo(x + 10, y);
  ctx.moveTo(x, y - 10); ctx.lineTo(x, y + 10);
  ctx.stroke();
  ctx.restore();
}

export function paint(state: ViewState, els: HudElements, now: number): void {
  const micMap = paintFrame(state.microscope, els.microscope, now);
  paintFrame(state.bscan, els.bscan, now);

  if (micMap) {
    const ctx = els.microscope.canvas.getContext("2d")!;
    if (state.targetPx) {
      const [x, y] = frameToCanvas(state.targetPx[0], state.targetPx[1], micMap);
      drawCrosshair(ctx, x, y, "#7CFC00", false);
    }
    if (state.pendingTargetPx) {
      const [x, y] = frameToCanvas(state.pendingTargetPx[0], state.pendingTargetPx[1], micMap);
      drawCrosshair(ctx, x, y, "#FFD700", true);
    }
  }

  els.phase.textContent = `${state.phase}${state.started ? "" : " (not started)"} · ${state.mode}`;
  els.attempts.textContent = `attempts ${state.attempts}`;
  els.timers.textContent =
    `nav ${state.navigationS.toFixed(1)}s · puncture ${state.punctureS.toFixed(1)}s`;
  els.connection.textContent = state.connection;
  els.connection.className = `conn-${state.connection}`;
  els.modeButton.textContent = state.mode === "auto" ? "switch to manual" : "switch to auto";
  els.gapBadge.textContent = state.seqGaps > 0 ? `frame gaps: ${state.seqGaps}` : "";
  els.toast.textContent = state.toast ?? "";
  els.toast.style.display = state.toast ? "block" : "none";
  els.hint.textContent = state.hint ?? "";
  els.hint.style.display = state.hint ? "block" : "none";

  if (state.result) {
    const r = state.result;
    els.banner.textContent = r.verdict === 1
      ? `puncture claimed (${r.outcome_class}) · nav ${r.navigation_s.toFixed(1)}s · puncture ${r.puncture_s.toFixed(1)}s`
      : `trial ended without puncture (${r.outcome_class}${r.abort_reason ? ", " + r.abort_reason : ""})`;
    els.banner.className = r.outcome_class === "TP" ? "banner ok" : "banner warn";
    els.banner.style.display = "block";
  } else {
    els.banner.style.display = "none";
  }

  // append new timeline entries only; existing DOM rows stay put
  while (els.timeline.childElementCount > state.timeline.length) {
    els.timeline.removeChild(els.timeline.firstChild!);
  }
  for (let i = els.timeline.childElementCount; i < state.timeline.length; i++) {
    const e = state.timeline[i];
    const row = document.createElement("div");
    row.className = "timeline-row";
    row.textContent = `t=${e.t.toFixed(1)}s ${e.phase}${e.note ? " — " + e.note : ""}`;
    els.timeline.appendChild(row);
    els.timeline.scrollTop = els.timeline.scrollHeight;
  }
}
