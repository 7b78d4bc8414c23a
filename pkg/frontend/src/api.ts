/** Thin client over the operator HTTP API, with a resumable event stream.
 *
 * The stream tracks the next expected seq; on any drop it reconnects with
 * `?from=<next>` after exponential backoff, so no event is ever lost or
 * duplicated downstream regardless of where the connection died.
 */

import type { AutopsyEvent, EventRecord, RunSummary } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface StreamOptions {
  fetchFn?: FetchLike;
  /** consecutive failed attempts tolerated before giving up */
  maxRetries?: number;
  backoffMs?: number;
  sleep?: (ms: number) => Promise<void>;
}

export interface MandateResult {
  accepted: boolean;
  status?: string;
  reason?: string;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export async function fetchSummary(
  base: string,
  runId: string,
  fetchFn: FetchLike = fetch,
): Promise<RunSummary> {
  const response = await fetchFn(`${base}/runs/${runId}`);
  if (!response.ok) {
    throw new Error(`summary failed: HTTP ${response.status}`);
  }
  return (await response.json()) as RunSummary;
}

export async function fetchEquityCsv(
  base: string,
  runId: string,
  fetchFn: FetchLike = fetch,
): Promise<string> {
  const response = await fetchFn(`${base}/runs/${runId}/equity`);
  if (!response.ok) {
    throw new Error(`equity failed: HTTP ${response.status}`);
  }
  return await response.text();
}

export async function submitMandate(
  base: string,
  runId: string,
  document: AutopsyEvent,
  fetchFn: FetchLike = fetch,
): Promise<MandateResult> {
  const response = await fetchFn(`${base}/runs/${runId}/mandate`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(document),
  });
  const body = (await response.json().catch(() => ({}))) as {
    status?: string;
    detail?: unknown;
  };
  if (!response.ok) {
    return { accepted: false, reason: describeDetail(body.detail, response.status) };
  }
  return { accepted: true, status: body.status };
}

export async function control(
  base: string,
  runId: string,
  action: "pause" | "resume" | "halt",
  fetchFn: FetchLike = fetch,
): Promise<{ ok: boolean; status?: string; reason?: string }> {
  const response = await fetchFn(`${base}/runs/${runId}/control`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify({ action }),
  });
  const body = (await response.json().catch(() => ({}))) as {
    status?: string;
    detail?: unknown;
  };
  if (!response.ok) {
    return { ok: false, reason: describeDetail(body.detail, response.status) };
  }
  return { ok: true, status: body.status };
}

function describeDetail(detail: unknown, status: number): string {
  if (typeof detail === "string") return detail;
  if (detail && typeof detail === "object") {
    const d = detail as { reason?: string; field?: string };
    if (d.reason && d.field) return `${d.reason}: ${d.field}`;
    if (d.reason) return d.reason;
    return JSON.stringify(detail);
  }
  return `HTTP ${status}`;
}

/** Follow a run's events from `fromSeq`, reconnecting across drops. */
export async function* streamEvents(
  base: string,
  runId: string,
  fromSeq = 0,
  options: StreamOptions = {},
): AsyncGenerator<EventRecord> {
  const fetchFn = options.fetchFn ?? fetch;
  const sleep = options.sleep ?? defaultSleep;
  const backoffMs = options.backoffMs ?? 500;
  const maxRetries = options.maxRetries ?? 6;
  let next = fromSeq;
  let failures = 0;

  for (;;) {
    try {
      const response = await fetchFn(`${base}/runs/${runId}/events?from=${next}`);
      if (!response.ok || !response.body) {
        throw new Error(`stream failed: HTTP ${response.status}`);
      }
      const reader = response.body.getReader();
      const decoder = new TextDecoder();
      let buffer = "";
      for (;;) {
        const { done, value } = await reader.read();
        if (value) buffer += decoder.decode(value, { stream: true });
        let newline: number;
        while ((newline = buffer.indexOf("\n")) >= 0) {
          const line = buffer.slice(0, newline).trim();
          buffer = buffer.slice(newline + 1);
          if (!line) continue;
          const record = JSON.parse(line) as EventRecord;
          if (record.seq < next) continue; // replayed overlap after resume
          if (record.seq > next) {
            throw new Error(`gap in stream: expected ${next}, got ${record.seq}`);
          }
          next = record.seq + 1;
          failures = 0;
          yield record;
        }
        if (done) break;
      }
      return; // server closed cleanly: the run is over
    } catch (err) {
      failures += 1;
      if (failures > maxRetries) throw err;
      await sleep(backoffMs * 2 ** (failures - 1));
      // reconnect resuming at `next`; nothing yielded is repeated
    }
  }
}
