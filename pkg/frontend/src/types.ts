/** Wire types mirrored from the operator HTTP API. */

export interface RunSummary {
  run_id: string;
  status: string;
  step_index: number;
  wealth: number;
  principal_loss: number;
  last_event_seq: number;
  pending_autopsy: AutopsyEvent | null;
}

export interface AutopsyEvent {
  event: string;
  metrics: { daily_pnl: number; slippage_leakage: number };
  diagnostics: { module: string; root_cause: string; execution_log: string };
  mandate: string;
}

export interface EventRecord {
  seq: number;
  timestamp: number;
  kind: string;
  payload: Record<string, unknown>;
}

export interface EquityPoint {
  step: number;
  wealth: number;
  reward: number;
  principalLoss: number;
  terminated: boolean;
}
