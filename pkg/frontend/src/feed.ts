/** Ordered, gapless event accumulation for the live feed.
 *
 * The feed accepts records only in exact seq order, drops duplicates, and
 * refuses gaps loudly — rendering is then trivially the server's log.
 */

import type { EventRecord } from "./types.js";

export class FeedGapError extends Error {}

export class EventFeed {
  private records: EventRecord[] = [];
  private readonly start: number;

  constructor(fromSeq = 0) {
    this.start = fromSeq;
  }

  get nextSeq(): number {
    const last = this.records[this.records.length - 1];
    return last ? last.seq + 1 : this.start;
  }

  /** Returns true when the record advanced the feed, false for duplicates. */
  ingest(record: EventRecord): boolean {
    if (record.seq < this.nextSeq) return false;
    if (record.seq > this.nextSeq) {
      throw new FeedGapError(`expected seq ${this.nextSeq}, got ${record.seq}`);
    }
    this.records.push(record);
    return true;
  }

  seqs(): number[] {
    return this.records.map((r) => r.seq);
  }

  all(): readonly EventRecord[] {
    return this.records;
  }

  tail(n: number): EventRecord[] {
    return this.records.slice(-n);
  }

  get length(): number {
    return this.records.length;
  }
}
