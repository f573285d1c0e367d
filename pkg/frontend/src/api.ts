// Thin fetch client for the bridge. The base URL is configurable at load
// (?api=<base> query parameter), defaulting to same-origin /api.

import type {
  DatasetForm,
  DatasetRecord,
  NodeInfo,
  NodeTask,
  PlanDetail,
  PlanRecord,
} from "./types.js";

export class AdminApiError extends Error {
  constructor(
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

export class GovApi {
  constructor(private base: string) {}

  static fromLocation(loc: Location): GovApi {
    const override = new URLSearchParams(loc.search).get("api");
    return new GovApi(override ?? "/api");
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(`${this.base}${path}`, {
      headers: { "content-type": "application/json" },
      ...init,
    });
    const body = await response.json().catch(() => ({}));
    if (!response.ok) {
      const err = (body as { error?: { code?: string; message?: string } }).error;
      throw new AdminApiError(err?.code ?? "ApiError",
        err?.message ?? `HTTP ${response.status}`);
    }
    return body as T;
  }

  nodeInfo(): Promise<NodeInfo> {
    return this.request<NodeInfo>("/node-info");
  }

  async listDatasets(): Promise<DatasetRecord[]> {
    const body = await this.request<{ datasets: DatasetRecord[] }>("/datasets");
    return body.datasets;
  }

  async addDataset(form: DatasetForm): Promise<string> {
    const body = await this.request<{ dataset_id: string }>("/datasets", {
      method: "POST",
      body: JSON.stringify(form),
    });
    return body.dataset_id;
  }

  deleteDataset(datasetId: string): Promise<unknown> {
    return this.request(`/datasets/${encodeURIComponent(datasetId)}`, {
      method: "DELETE",
    });
  }

  async listPlans(): Promise<PlanRecord[]> {
    const body = await this.request<{ plans: PlanRecord[] }>("/plans");
    return body.plans;
  }

  getPlan(planHash: string): Promise<PlanDetail> {
    return this.request<PlanDetail>(`/plans/${encodeURIComponent(planHash)}`);
  }

  reviewPlan(planHash: string, decision: "approved" | "rejected",
             note: string): Promise<unknown> {
    return this.request(`/plans/${encodeURIComponent(planHash)}/review`, {
      method: "POST",
      body: JSON.stringify({ decision, note }),
    });
  }

  async listTasks(): Promise<NodeTask[]> {
    const body = await this.request<{ tasks: NodeTask[] }>("/tasks");
    return body.tasks;
  }

  stopTask(): Promise<{ was_running: boolean }> {
    return this.request("/tasks/stop", { method: "POST", body: "{}" });
  }
}
