/** Mandate composer state.
 *
 * The server-built degradation event is taken verbatim; the operator edits
 * exactly one field, the mandate text. Everything else would be rejected by
 * the server's strict schema anyway.
 */

import type { AutopsyEvent } from "./types.js";

export class MandateDraft {
  readonly pending: AutopsyEvent;
  private text = "";

  constructor(pending: AutopsyEvent) {
    this.pending = pending;
  }

  setText(text: string): void {
    this.text = text;
  }

  get mandateText(): string {
    return this.text;
  }

  /** Submission is enabled only with non-empty text on an awaiting run. */
  canSubmit(runStatus: string): boolean {
    return runStatus === "AwaitingMandate" && this.text.trim().length > 0;
  }

  buildDocument(): AutopsyEvent {
    return {
      event: this.pending.event,
      metrics: { ...this.pending.metrics },
      diagnostics: { ...this.pending.diagnostics },
      mandate: this.text,
    };
  }
}
