export interface DecisionOption {
  action: number;
  summary?: Record<string, unknown>;
  [key: string]: unknown;
}

export interface DecisionPayload {
  kind: string;
  legal_actions: number[];
  options?: DecisionOption[];
  [key: string]: unknown;
}

// Commit-style kinds accept/bid by taking the first legal action.
const COMMIT_KINDS = new Set(["cell_commitment", "bid_submission"]);

function loadKey(byAction: Map<number, DecisionOption>, action: number): [number, number, number] {
  const summary = (byAction.get(action)?.summary ?? {}) as Record<string, unknown>;
  const backlog = typeof summary.backlog_jobs === "number" ? summary.backlog_jobs : 0;
  const active = typeof summary.active_jobs === "number" ? summary.active_jobs : 0;
  return [backlog, active, action];
}

function lessThan(a: [number, number, number], b: [number, number, number]): boolean {
  if (a[0] !== b[0]) return a[0] < b[0];
  if (a[1] !== b[1]) return a[1] < b[1];
  return a[2] < b[2];
}

/**
 * Same policy as the runtime's built-in fallback rule: commit-style kinds
 * take the first legal action, selection kinds take the least-loaded option
 * (queued jobs, then active jobs, then lowest action index).
 */
export function chooseAction(payload: DecisionPayload): number {
  const legal = payload.legal_actions;
  if (!Array.isArray(legal) || legal.length === 0) {
    throw new Error("payload has no legal actions");
  }
  if (COMMIT_KINDS.has(payload.kind)) {
    return legal[0];
  }
  const byAction = new Map<number, DecisionOption>();
  for (const option of payload.options ?? []) {
    byAction.set(option.action, option);
  }
  let best = legal[0];
  let bestKey = loadKey(byAction, best);
  for (const action of legal.slice(1)) {
    const key = loadKey(byAction, action);
    if (lessThan(key, bestKey)) {
      best = action;
      bestKey = key;
    }
  }
  return best;
}
