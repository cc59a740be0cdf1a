// Typed client for the annotation service JSON API.
//
// Every number shown anywhere in the UI originates from one of these
// responses; the client never post-processes values beyond JSON parsing.

export interface EvidenceRow {
  bucket: string;
  label: string;
  id: string;
  similarity: number;
}

export interface QueueItem {
  id: string;
  mode: string;
  best_similarity: number | null;
  suggested_label: string | null;
  evidence: EvidenceRow[];
}

export interface QueuePayload {
  mode: string;
  items: QueueItem[];
}

export interface InstanceView {
  id: string;
  tokens: string[];
  e1_span: [number, number];
  e2_span: [number, number];
  e1_type: string;
  e2_type: string;
  pattern: string;
  variant: string;
  used_fallback: boolean;
  labeled: boolean;
  label: string | null;
  in_pool: boolean;
}

export interface NeighborRow {
  id: string;
  similarity: number;
  pattern: string | null;
  label: string;
}

export interface BucketEvidence {
  bucket: string;
  label: string;
  mean_similarity: number;
  best_similarity: number;
  neighbors: NeighborRow[];
}

export interface NeighborsPayload {
  id: string;
  pattern: string;
  variant: string;
  used_fallback: boolean;
  k: number;
  buckets: BucketEvidence[];
  suggested_label?: string;
}

export interface LabelInventory {
  relations: string[];
  no_relation: string;
  all: string[];
}

export interface LabelReceipt {
  accepted: boolean;
  id: string;
  label: string;
  bucket: string;
  new_bucket_size: number;
  bucket_sizes: Record<string, number>;
  version: number;
}

export interface ServiceStats {
  version: number;
  pool_size: number;
  labeled_count: number;
  audit_entries: number;
  labels_per_class: Record<string, number>;
  fallback_rate: number;
  index: {
    dimension: number;
    total_entries: number;
    bucket_counts: Record<string, Record<string, number>>;
  };
  variant: string;
  k: number;
}

export interface ExportReceipt {
  path: string;
  labels: number;
  audit_entries: number;
}

/** Non-2xx response (status from the server) or unreachable service (status 0). */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }

  get unreachable(): boolean {
    return this.status === 0;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + path, init);
    } catch (error) {
      throw new ApiError(0, `service unreachable: ${String(error)}`);
    }
    if (!response.ok) {
      let detail = `${response.status} ${response.statusText}`;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") {
          detail = body.detail;
        }
      } catch {
        // non-JSON error body; keep the status line
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  queue(mode: "explore" | "exploit", limit: number): Promise<QueuePayload> {
    const params = new URLSearchParams({ mode, limit: String(limit) });
    return this.request(`/api/queue?${params}`);
  }

  instance(id: string): Promise<InstanceView> {
    return this.request(`/api/instance/${encodeURIComponent(id)}`);
  }

  neighbors(id: string, k?: number): Promise<NeighborsPayload> {
    const suffix = k === undefined ? "" : `?k=${k}`;
    return this.request(`/api/neighbors/${encodeURIComponent(id)}${suffix}`);
  }

  labels(): Promise<LabelInventory> {
    return this.request("/api/labels");
  }

  stats(): Promise<ServiceStats> {
    return this.request("/api/stats");
  }

  submitLabel(id: string, label: string, annotator = "annot-ui"): Promise<LabelReceipt> {
    return this.request("/api/label", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ id, label, annotator }),
    });
  }

  exportState(path: string): Promise<ExportReceipt> {
    return this.request("/api/export", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ path }),
    });
  }
}
