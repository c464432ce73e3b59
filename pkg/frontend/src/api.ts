// Thin API clients over the documented HTTP surfaces.
//
// `fetch` and the auth provider are injected so tests can substitute fakes
// and so the browser never handles private keys: center authentication is
// delegated to whatever signer the host page wires in (e.g. a local helper
// that holds the researcher key), mirroring how hop decisions are signed by
// the station agent rather than the browser.

import type {
  PendingApprovalView,
  ResultSummaryPayload,
  TrainStatusPayload,
  Verdict,
} from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Produces the X-Auth-* headers for one center request (challenge-signed). */
export interface AuthProvider {
  headers(): Promise<Record<string, string>>;
}

/** For endpoints (or deployments) that need no authentication. */
export const nullAuth: AuthProvider = {
  headers: () => Promise.resolve({}),
};

export class ApiError extends Error {
  constructor(
    public readonly code: string,
    public readonly status: number,
    detail: string,
  ) {
    super(`${code}: ${detail}`);
  }
}

async function jsonOrThrow<T>(response: Response): Promise<T> {
  const body = await response.json().catch(() => ({}));
  if (!response.ok) {
    throw new ApiError(
      (body as { error?: string }).error ?? 'HttpError',
      response.status,
      (body as { detail?: string }).detail ?? response.statusText,
    );
  }
  return body as T;
}

/** Client of the station agent's local admin API. */
export class StationAdminApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike,
  ) {}

  async listPending(): Promise<PendingApprovalView[]> {
    const body = await jsonOrThrow<{ pending: PendingApprovalView[] }>(
      await this.fetchFn(`${this.baseUrl}/pending`),
    );
    return body.pending;
  }

  async submitDecision(trainId: string, verdict: Verdict, reason: string): Promise<void> {
    await jsonOrThrow(
      await this.fetchFn(`${this.baseUrl}/pending/${trainId}/decision`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ verdict, reason }),
      }),
    );
  }
}

/** Read-only client of the service center (status / results / ledger). */
export class CenterApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike,
    private readonly auth: AuthProvider,
  ) {}

  private async get<T>(path: string): Promise<T> {
    const headers = await this.auth.headers();
    return jsonOrThrow<T>(await this.fetchFn(`${this.baseUrl}${path}`, { headers }));
  }

  trainStatus(trainId: string): Promise<TrainStatusPayload> {
    return this.get(`/trains/${trainId}/status`);
  }

  /** Raw results payload; the envelope stays encrypted for the researcher key. */
  trainResults(trainId: string): Promise<{ envelope: string; manifest_digest: string }> {
    return this.get(`/trains/${trainId}/results`);
  }

  trainLedger(trainId: string): Promise<{ entries: unknown[]; verification: string | number }> {
    return this.get(`/trains/${trainId}/ledger`);
  }
}

/**
 * Optional decryptor for the released envelope. The browser holds no private
 * keys, so by default results render as "released" without metrics; a host
 * page may inject a decryptor backed by a local signer/helper to show the
 * metrics table.
 */
export type ResultDecryptor = (fetched: {
  envelope: string;
  manifest_digest: string;
}) => Promise<ResultSummaryPayload>;
