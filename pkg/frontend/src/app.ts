/** DOM wiring for the operator console: summary polling, equity chart,
 * live event feed, mandate composer, and run controls. All state shown here
 * comes from API responses; nothing financial is synthesized client-side.
 */

import { control, fetchEquityCsv, fetchSummary, streamEvents, submitMandate } from "./api.js";
import { buildChartModel, parseEquityCsv } from "./equity.js";
import { EventFeed } from "./feed.js";
import { MandateDraft } from "./mandate.js";
import type { RunSummary } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

let baseUrl = "";
let runId = "";
let tau = 0.2;
let summary: RunSummary | null = null;
let draft: MandateDraft | null = null;
let feed = new EventFeed(0);
let connected = false;

function banner(text: string, kind: "error" | "info" = "error"): void {
  const el = $("banner");
  el.textContent = text;
  el.className = text ? `banner ${kind}` : "banner hidden";
}

function renderSummary(): void {
  if (!summary) return;
  $("status").textContent = summary.status;
  $("status").dataset.status = summary.status;
  $("step").textContent = String(summary.step_index);
  $("wealth").textContent = summary.wealth.toFixed(2);
  $("loss").textContent = (summary.principal_loss * 100).toFixed(2) + "%";
  const alertBox = $("autopsy");
  if (summary.pending_autopsy) {
    alertBox.classList.remove("hidden");
    $("autopsy-json").textContent = JSON.stringify(summary.pending_autopsy, null, 2);
    if (!draft || draft.pending.diagnostics.root_cause
        !== summary.pending_autopsy.diagnostics.root_cause) {
      draft = new MandateDraft(summary.pending_autopsy);
    }
  } else {
    alertBox.classList.add("hidden");
    draft = null;
  }
  const textarea = $("mandate-text") as HTMLTextAreaElement;
  const submit = $("mandate-submit") as HTMLButtonElement;
  if (draft && summary) {
    draft.setText(textarea.value);
    submit.disabled = !draft.canSubmit(summary.status);
  } else {
    submit.disabled = true;
  }
}

function renderFeed(): void {
  const list = $("feed");
  list.innerHTML = "";
  for (const record of feed.tail(200)) {
    const li = document.createElement("li");
    li.className = `event event-${record.kind}`;
    li.textContent = `#${record.seq} ${record.kind} ${JSON.stringify(record.payload)}`;
    list.appendChild(li);
  }
  list.scrollTop = list.scrollHeight;
  $("feed-count").textContent = `${feed.length} events`;
}

function renderChart(csv: string): void {
  let model;
  try {
    const points = parseEquityCsv(csv);
    if (points.length === 0) {
      $("chart-note").textContent = "no steps yet";
      return;
    }
    model = buildChartModel(points, tau);
  } catch (err) {
    banner(`equity chart unavailable: ${(err as Error).message}`);
    return;
  }
  const svg = $("chart");
  const breach = model.breach
    ? `<circle cx="${model.breach.x}" cy="${model.breach.y}" r="5" class="breach"/>` +
      `<text x="${model.breach.x + 8}" y="${model.breach.y - 6}" class="breach-label">` +
      `breach @ step ${model.breach.step}</text>`
    : "";
  svg.innerHTML =
    `<polyline points="${model.wealthPath}" class="wealth"/>` +
    `<polyline points="${model.lossPath}" class="loss"/>` +
    `<line x1="0" y1="${model.tauY}" x2="${model.width}" y2="${model.tauY}" class="tau"/>` +
    breach;
  $("chart-note").textContent = model.breach ? "loss threshold breached" : "";
}

async function pollSummary(): Promise<void> {
  if (!connected) return;
  try {
    summary = await fetchSummary(baseUrl, runId);
    renderSummary();
    banner("");
  } catch (err) {
    banner(`summary: ${(err as Error).message}`);
  }
  setTimeout(pollSummary, 2000);
}

async function pollEquity(): Promise<void> {
  if (!connected) return;
  try {
    renderChart(await fetchEquityCsv(baseUrl, runId));
  } catch (err) {
    banner(`equity: ${(err as Error).message}`);
  }
  setTimeout(pollEquity, 5000);
}

async function followEvents(): Promise<void> {
  try {
    for await (const record of streamEvents(baseUrl, runId, feed.nextSeq)) {
      feed.ingest(record);
      renderFeed();
    }
    banner("run finished: event stream closed", "info");
  } catch (err) {
    banner(`event stream: ${(err as Error).message}`);
  }
}

async function onMandateSubmit(): Promise<void> {
  if (!draft || !summary) return;
  draft.setText(($("mandate-text") as HTMLTextAreaElement).value);
  if (!draft.canSubmit(summary.status)) return;
  const result = await submitMandate(baseUrl, runId, draft.buildDocument());
  if (result.accepted) {
    banner(`mandate accepted, status ${result.status}`, "info");
    ($("mandate-text") as HTMLTextAreaElement).value = "";
  } else {
    banner(`mandate rejected: ${result.reason}`);
  }
}

async function onControl(action: "pause" | "resume" | "halt"): Promise<void> {
  const result = await control(baseUrl, runId, action);
  if (result.ok) {
    banner(`${action}: status ${result.status}`, "info");
  } else {
    banner(`${action} rejected: ${result.reason}`);
  }
}

function connect(): void {
  baseUrl = ($("base-url") as HTMLInputElement).value.replace(/\/+$/, "");
  runId = ($("run-id") as HTMLInputElement).value.trim();
  tau = Number(($("tau") as HTMLInputElement).value) || 0.2;
  if (!baseUrl || !runId) {
    banner("enter the API base URL and run id");
    return;
  }
  connected = true;
  feed = new EventFeed(0);
  void pollSummary();
  void pollEquity();
  void followEvents();
}

export function bootstrap(): void {
  $("connect").addEventListener("click", connect);
  $("mandate-submit").addEventListener("click", () => void onMandateSubmit());
  $("mandate-text").addEventListener("input", renderSummary);
  $("btn-pause").addEventListener("click", () => void onControl("pause"));
  $("btn-resume").addEventListener("click", () => void onControl("resume"));
  $("btn-halt").addEventListener("click", () => void onControl("halt"));
}

if (typeof document !== "undefined" && document.getElementById("connect")) {
  bootstrap();
}
