/** Equity CSV parsing and chart geometry.
 *
 * All financial numbers come straight from the server export; this module
 * only parses and projects them to screen coordinates.
 */

import type { EquityPoint } from "./types.js";

export const EQUITY_HEADER = "step,wealth,reward,L_t,terminated";

export class EquityParseError extends Error {}

export function parseEquityCsv(text: string): EquityPoint[] {
  const lines = text.split("\n").filter((line) => line.trim().length > 0);
  if (lines.length === 0 || lines[0] !== EQUITY_HEADER) {
    throw new EquityParseError(`equity CSV must start with "${EQUITY_HEADER}"`);
  }
  const points: EquityPoint[] = [];
  for (let i = 1; i < lines.length; i += 1) {
    const cells = (lines[i] ?? "").split(",");
    if (cells.length !== 5) {
      throw new EquityParseError(`row ${i}: expected 5 cells, got ${cells.length}`);
    }
    const step = Number(cells[0]);
    const wealth = Number(cells[1]);
    const reward = Number(cells[2]);
    const principalLoss = Number(cells[3]);
    const terminated = cells[4] === "true";
    if (!Number.isFinite(step) || !Number.isFinite(wealth) ||
        !Number.isFinite(reward) || !Number.isFinite(principalLoss)) {
      throw new EquityParseError(`row ${i}: non-numeric cell`);
    }
    points.push({ step, wealth, reward, principalLoss, terminated });
  }
  return points;
}

/** Index of the first point at or beyond the loss threshold, or null. */
export function breachIndex(points: EquityPoint[], tau: number): number | null {
  for (let i = 0; i < points.length; i += 1) {
    const p = points[i];
    if (p && p.principalLoss >= tau) return i;
  }
  return null;
}

export interface ChartModel {
  /** "x,y x,y ..." polyline for wealth, in a width x height viewBox */
  wealthPath: string;
  /** polyline for principal loss on its own [0, max(tau*1.5, maxLoss)] scale */
  lossPath: string;
  /** y coordinate of the horizontal tau line in the loss scale */
  tauY: number;
  /** chart coordinates of the first breach point, if any */
  breach: { x: number; y: number; step: number } | null;
  width: number;
  height: number;
}

export function buildChartModel(
  points: EquityPoint[],
  tau: number,
  width = 800,
  height = 240,
): ChartModel {
  if (points.length === 0) {
    throw new EquityParseError("no equity points to chart");
  }
  const xs = (i: number) =>
    points.length === 1 ? width / 2 : (i / (points.length - 1)) * width;

  const wealths = points.map((p) => p.wealth);
  const wMin = Math.min(...wealths);
  const wMax = Math.max(...wealths);
  const wSpan = wMax - wMin || 1;
  const wealthY = (w: number) => height - ((w - wMin) / wSpan) * height;

  const losses = points.map((p) => p.principalLoss);
  const lossTop = Math.max(tau * 1.5, ...losses, 1e-9);
  const lossY = (l: number) => height - (Math.max(l, 0) / lossTop) * height;

  const wealthPath = points
    .map((p, i) => `${xs(i).toFixed(1)},${wealthY(p.wealth).toFixed(1)}`)
    .join(" ");
  const lossPath = points
    .map((p, i) => `${xs(i).toFixed(1)},${lossY(p.principalLoss).toFixed(1)}`)
    .join(" ");

  const breachAt = breachIndex(points, tau);
  const breachPoint = points[breachAt ?? -1];
  return {
    wealthPath,
    lossPath,
    tauY: lossY(tau),
    breach:
      breachAt === null || !breachPoint
        ? null
        : { x: xs(breachAt), y: lossY(breachPoint.principalLoss), step: breachPoint.step },
    width,
    height,
  };
}
