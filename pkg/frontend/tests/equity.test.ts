import { readFileSync } from "node:fs";
import { join } from "node:path";
import { fileURLToPath } from "node:url";

import { describe, expect, it } from "vitest";

import {
  EQUITY_HEADER,
  EquityParseError,
  breachIndex,
  buildChartModel,
  parseEquityCsv,
} from "../src/equity.js";

const here = fileURLToPath(new URL(".", import.meta.url));
const recordedCsv = readFileSync(join(here, "fixtures", "equity.csv"), "utf-8");

// Wealth path from the terminal-breach harness fixture: tau = 0.20 is
// crossed at the third step.
const BREACH_CSV = [
  EQUITY_HEADER,
  "1,900.0,-0.1,0.09999999999999998,false",
  "2,828.0,-0.08,0.17200000000000004,false",
  "3,786.6,-100.0,0.21340000000000003,true",
].join("\n") + "\n";

describe("parseEquityCsv", () => {
  it("parses the recorded run export", () => {
    const points = parseEquityCsv(recordedCsv);
    expect(points.length).toBe(500);
    expect(points[0]?.step).toBe(1);
    expect(points.every((p) => Number.isFinite(p.wealth))).toBe(true);
  });

  it("rejects a wrong header", () => {
    expect(() => parseEquityCsv("step,wealth\n1,2\n")).toThrow(EquityParseError);
  });

  it("rejects ragged and non-numeric rows", () => {
    expect(() => parseEquityCsv(EQUITY_HEADER + "\n1,2,3\n")).toThrow(EquityParseError);
    expect(() => parseEquityCsv(EQUITY_HEADER + "\n1,x,0,0,false\n")).toThrow(
      EquityParseError,
    );
  });
});

describe("breachIndex", () => {
  it("is null for a series that never crosses the threshold", () => {
    const points = parseEquityCsv(recordedCsv);
    expect(breachIndex(points, 0.2)).toBeNull();
  });

  it("marks the first crossing step", () => {
    const points = parseEquityCsv(BREACH_CSV);
    expect(breachIndex(points, 0.2)).toBe(2);
    expect(breachIndex(points, 0.15)).toBe(1);
  });
});

describe("buildChartModel", () => {
  it("projects wealth and loss with a threshold line", () => {
    const model = buildChartModel(parseEquityCsv(BREACH_CSV), 0.2, 800, 240);
    expect(model.wealthPath.split(" ").length).toBe(3);
    expect(model.lossPath.split(" ").length).toBe(3);
    expect(model.tauY).toBeGreaterThan(0);
    expect(model.tauY).toBeLessThan(240);
    expect(model.breach).not.toBeNull();
    expect(model.breach?.step).toBe(3);
    expect(model.breach?.x).toBeCloseTo(800, 5);
  });

  it("omits the breach marker when below threshold", () => {
    const model = buildChartModel(parseEquityCsv(recordedCsv), 0.2);
    expect(model.breach).toBeNull();
  });

  it("throws on an empty series", () => {
    expect(() => buildChartModel([], 0.2)).toThrow(EquityParseError);
  });
});
