/** Typed client for the elicitation session HTTP API. */

export type Protocol = "edge" | "ordering";

export interface SessionConfig {
  budget: number;
  seed?: number;
  criterion?: "eig" | "eopt" | "random";
  protocol?: Protocol;
  network?: {
    nodes: string[];
    descriptions?: Record<string, string>;
  };
}

export interface NextQuery {
  pair: [string, string];
  question_text: string;
  remaining: number;
}

/** [source, target, confidence] as the server reports it. */
export type EstimateEdge = [string, string, number];

export interface EstimateSummary {
  edges: EstimateEdge[];
  entropy: number[];
  answered: number;
  remaining?: number;
}

/** A service-side failure, carrying the HTTP status and server error code. */
export class ServiceError extends Error {
  constructor(
    readonly status: number,
    readonly errorCode: string,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

export type FetchLike = (
  url: string,
  init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
  },
) => Promise<{
  status: number;
  json(): Promise<unknown>;
}>;

export interface ClientOptions {
  baseUrl: string;
  token?: string;
  fetchFn?: FetchLike;
}

async function parseError(status: number, resp: { json(): Promise<unknown> }): Promise<never> {
  let code = "UnknownError";
  let message = `request failed with status ${status}`;
  try {
    const body = (await resp.json()) as { error_code?: string; message?: string };
    if (body && typeof body.error_code === "string") code = body.error_code;
    if (body && typeof body.message === "string") message = body.message;
  } catch {
    // non-JSON error body; keep the generic message
  }
  throw new ServiceError(status, code, message);
}

export class SessionClient {
  private readonly baseUrl: string;
  private readonly token?: string;
  private readonly fetchFn: FetchLike;

  constructor(options: ClientOptions) {
    this.baseUrl = options.baseUrl.replace(/\/$/, "");
    this.token = options.token;
    this.fetchFn = options.fetchFn ?? (globalThis.fetch as unknown as FetchLike);
  }

  private headers(): Record<string, string> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (resp.status >= 400) await parseError(resp.status, resp);
    return (await resp.json()) as T;
  }

  async createSession(config: SessionConfig): Promise<string> {
    const body = await this.request<{ session_id: string }>("POST", "/sessions", config);
    return body.session_id;
  }

  async nextQuery(sessionId: string): Promise<NextQuery> {
    return this.request<NextQuery>("GET", `/sessions/${sessionId}/next-query`);
  }

  async submitResponse(sessionId: string, value: number): Promise<EstimateSummary> {
    const body = await this.request<{ estimate_summary: EstimateSummary }>(
      "POST",
      `/sessions/${sessionId}/responses`,
      { value },
    );
    return body.estimate_summary;
  }

  async getEstimate(sessionId: string): Promise<EstimateSummary> {
    return this.request<EstimateSummary>("GET", `/sessions/${sessionId}/estimate`);
  }
}
