import { describe, expect, it } from "vitest";

import { EventFeed, FeedGapError } from "../src/feed.js";
import type { EventRecord } from "../src/types.js";

const record = (seq: number): EventRecord => ({
  seq,
  timestamp: 0,
  kind: "market_step",
  payload: { step: seq },
});

describe("EventFeed", () => {
  it("accepts records in exact order", () => {
    const feed = new EventFeed(0);
    expect(feed.ingest(record(0))).toBe(true);
    expect(feed.ingest(record(1))).toBe(true);
    expect(feed.seqs()).toEqual([0, 1]);
    expect(feed.nextSeq).toBe(2);
  });

  it("ignores duplicates from replayed resume overlap", () => {
    const feed = new EventFeed(0);
    feed.ingest(record(0));
    feed.ingest(record(1));
    expect(feed.ingest(record(1))).toBe(false);
    expect(feed.ingest(record(0))).toBe(false);
    expect(feed.seqs()).toEqual([0, 1]);
  });

  it("refuses gaps loudly", () => {
    const feed = new EventFeed(0);
    feed.ingest(record(0));
    expect(() => feed.ingest(record(2))).toThrow(FeedGapError);
  });

  it("supports a non-zero starting seq", () => {
    const feed = new EventFeed(10);
    expect(feed.nextSeq).toBe(10);
    expect(feed.ingest(record(9))).toBe(false);
    expect(feed.ingest(record(10))).toBe(true);
  });

  it("tail returns the latest records", () => {
    const feed = new EventFeed(0);
    for (let i = 0; i < 10; i += 1) feed.ingest(record(i));
    expect(feed.tail(3).map((r) => r.seq)).toEqual([7, 8, 9]);
  });
});
