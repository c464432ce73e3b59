// HTML rendering: view models in, markup strings out. Framework-free so the
// host page can set innerHTML and wire events; every dynamic value passes
// through escapeHtml on the way in.

import type {
  PendingApprovalView,
  ResultView,
  RouteProgressView,
} from './types.js';
import type { PollerState } from './poller.js';

export function escapeHtml(value: string): string {
  return value
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
    .replace(/'/g, '&#39;');
}

function metricRows(metrics: Record<string, string | number>): string {
  return Object.entries(metrics)
    .map(
      ([name, value]) =>
        `<tr><td>${escapeHtml(name)}</td><td>${escapeHtml(String(value))}</td></tr>`,
    )
    .join('');
}

export function renderBanner(state: PollerState): string {
  if (state.errorBanner === null && !state.stale) return '';
  const classes = state.stale ? 'banner banner-stale' : 'banner banner-error';
  const text = state.stale
    ? `data is stale (${state.missedPolls} missed polls): ${state.errorBanner ?? ''}`
    : (state.errorBanner ?? '');
  return `<div class="${classes}" role="alert">${escapeHtml(text)}</div>`;
}

export function renderPendingApproval(view: PendingApprovalView): string {
  const metric = (m: Record<string, number>) =>
    Object.entries(m)
      .map(([k, v]) => `${escapeHtml(k)}=${v.toFixed(4)}`)
      .join(', ') || 'n/a';
  return `
<section class="pending-card" data-train="${escapeHtml(view.train_id)}">
  <h3>${escapeHtml(view.train_id)} <span class="task-kind">${escapeHtml(view.task_kind)}</span></h3>
  <dl>
    <dt>local records</dt><dd>${view.record_count}</dd>
    <dt>metric before</dt><dd>${metric(view.pre_metric)}</dd>
    <dt>metric after</dt><dd>${metric(view.post_metric)}</dd>
    <dt>state digest in</dt><dd><code>${escapeHtml(view.state_digest_in.slice(0, 16))}…</code></dd>
    <dt>state digest out</dt><dd><code>${escapeHtml(view.state_digest_out.slice(0, 16))}…</code></dd>
    <dt>waiting since</dt><dd>${escapeHtml(view.created_at)}</dd>
  </dl>
  <form class="decision-form">
    <label>reason <input name="reason" type="text" /></label>
    <button name="approve" type="button">Approve</button>
    <button name="reject" type="button">Reject</button>
    <span class="validation" hidden>rejecting requires a reason</span>
  </form>
</section>`;
}

export function renderRouteProgress(view: RouteProgressView): string {
  const steps = view.stations
    .map(
      (s) =>
        `<li class="hop hop-${s.state}">${escapeHtml(s.station_id)} <em>${s.state}</em></li>`,
    )
    .join('');
  const outstanding = view.approvals_outstanding.length
    ? `<p class="outstanding">awaiting votes: ${view.approvals_outstanding
        .map(escapeHtml)
        .join(', ')}</p>`
    : '';
  return `
<section class="route-card" data-train="${escapeHtml(view.train_id)}">
  <h3>${escapeHtml(view.train_id)} <span class="status status-${view.status}">${view.status}</span></h3>
  <ol class="route">${steps}</ol>
  ${outstanding}
  <p class="results-flag">${view.results_available ? 'results available' : 'results not yet available'}</p>
</section>`;
}

export function renderResult(view: ResultView): string {
  switch (view.kind) {
    case 'not-ready':
      return `<section class="result result-not-ready"><p>results not ready (route ${view.status})</p></section>`;
    case 'blocked': {
      const items = view.violations
        .map((v) => `<li>${escapeHtml(v.name)}: ${escapeHtml(v.detail)}</li>`)
        .join('');
      return `<section class="result result-blocked"><p>withheld by exit control</p><ul>${items}</ul></section>`;
    }
    case 'released': {
      if (view.summary === null) {
        return `<section class="result result-released"><p>results released — decrypt with your researcher key</p></section>`;
      }
      const checks = view.summary.exit_control_report
        .map(
          (c) =>
            `<li class="${c.passed ? 'check-pass' : 'check-fail'}">${escapeHtml(c.name)}: ${escapeHtml(c.detail)}</li>`,
        )
        .join('');
      return `
<section class="result result-released">
  <h3>${escapeHtml(view.summary.task_kind)} — ${view.summary.total_records} records</h3>
  <table class="metrics"><tbody>${metricRows(view.summary.metrics)}</tbody></table>
  <ul class="exit-control">${checks}</ul>
</section>`;
    }
  }
}
