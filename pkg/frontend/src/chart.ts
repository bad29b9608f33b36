/** Precision-vs-threshold line chart as plain SVG, with a draggable
 * threshold marker. Zero-support thresholds render as gaps in the line.
 * All values are read from the server-supplied curve. */

import type { CurvePoint, PrecisionCurve } from "./types.js";

export interface ChartGeometry {
  width: number;
  height: number;
  padLeft: number;
  padBottom: number;
}

export const DEFAULT_GEOMETRY: ChartGeometry = {
  width: 360,
  height: 220,
  padLeft: 34,
  padBottom: 22,
};

export function domain(curve: PrecisionCurve): [number, number] {
  const ts = curve.points.map((p) => p.threshold);
  return [Math.min(...ts), Math.max(...ts)];
}

export function xScale(curve: PrecisionCurve, geo: ChartGeometry): (t: number) => number {
  const [lo, hi] = domain(curve);
  const span = hi - lo || 1;
  return (t) => geo.padLeft + ((t - lo) / span) * (geo.width - geo.padLeft - 4);
}

export function yScale(geo: ChartGeometry): (p: number) => number {
  return (p) => (geo.height - geo.padBottom) * (1 - p) + 2;
}

export function xToThreshold(curve: PrecisionCurve, geo: ChartGeometry, x: number): number {
  const [lo, hi] = domain(curve);
  const span = geo.width - geo.padLeft - 4;
  const frac = Math.min(1, Math.max(0, (x - geo.padLeft) / span));
  return lo + frac * (hi - lo);
}

/** Contiguous runs of supported (non-null precision) points. */
export function segments(curve: PrecisionCurve): CurvePoint[][] {
  const runs: CurvePoint[][] = [];
  let current: CurvePoint[] = [];
  for (const point of curve.points) {
    if (point.precision === null) {
      if (current.length) {
        runs.push(current);
        current = [];
      }
    } else {
      current.push(point);
    }
  }
  if (current.length) {
    runs.push(current);
  }
  return runs;
}

/** Curve point whose threshold is closest to the marker position. */
export function nearestPoint(curve: PrecisionCurve, threshold: number): CurvePoint {
  let best = curve.points[0];
  for (const point of curve.points) {
    if (Math.abs(point.threshold - threshold) < Math.abs(best.threshold - threshold)) {
      best = point;
    }
  }
  return best;
}

function polyline(points: CurvePoint[], sx: (t: number) => number, sy: (p: number) => number): string {
  return points.map((p) => `${sx(p.threshold).toFixed(1)},${sy(p.precision!).toFixed(1)}`).join(" ");
}

/** Rebuild the SVG contents for a curve + marker. Pure DOM construction so
 * jsdom can exercise it; returns the snapped readout point. */
export function renderChart(
  svg: SVGSVGElement,
  curve: PrecisionCurve,
  marker: number,
  geo: ChartGeometry = DEFAULT_GEOMETRY,
): CurvePoint {
  const doc = svg.ownerDocument;
  const ns = "http://www.w3.org/2000/svg";
  svg.setAttribute("viewBox", `0 0 ${geo.width} ${geo.height}`);
  while (svg.firstChild) {
    svg.removeChild(svg.firstChild);
  }

  const sx = xScale(curve, geo);
  const sy = yScale(geo);

  const axis = doc.createElementNS(ns, "path");
  const x0 = geo.padLeft;
  const yBase = geo.height - geo.padBottom;
  axis.setAttribute("d", `M ${x0} 2 V ${yBase} H ${geo.width - 4}`);
  axis.setAttribute("class", "axis");
  svg.appendChild(axis);

  for (const run of segments(curve)) {
    const line = doc.createElementNS(ns, "polyline");
    line.setAttribute("points", polyline(run, sx, sy));
    line.setAttribute("class", "curve");
    svg.appendChild(line);
  }

  const snapped = nearestPoint(curve, marker);
  const markerLine = doc.createElementNS(ns, "line");
  const mx = sx(marker);
  markerLine.setAttribute("x1", mx.toFixed(1));
  markerLine.setAttribute("x2", mx.toFixed(1));
  markerLine.setAttribute("y1", "2");
  markerLine.setAttribute("y2", String(yBase));
  markerLine.setAttribute("class", "marker");
  markerLine.setAttribute("data-threshold", String(marker));
  svg.appendChild(markerLine);

  if (snapped.precision !== null) {
    const dot = doc.createElementNS(ns, "circle");
    dot.setAttribute("cx", sx(snapped.threshold).toFixed(1));
    dot.setAttribute("cy", sy(snapped.precision).toFixed(1));
    dot.setAttribute("r", "3.5");
    dot.setAttribute("class", "readout-dot");
    svg.appendChild(dot);
  }
  return snapped;
}
