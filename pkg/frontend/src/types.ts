// Shapes served by the node admin API, forwarded verbatim by the bridge.

export interface NodePolicy {
  min_samples_for_training: number;
  max_batch_size: number;
  max_num_local_updates: number;
  approval_required: boolean;
}

export interface NodeInfo {
  node_id: string;
  policy: NodePolicy;
}

export interface DatasetRecord {
  dataset_id: string;
  display_name: string;
  tags: string[];
  data_type: "tabular" | "folder_image";
  path: string;
  sample_count: number;
  column_summary: string[] | null;
  loading_plan_id: string | null;
  target_column: string | null;
}

export type PlanStatus = "pending" | "approved" | "rejected";

export interface PlanRecord {
  plan_hash: string;
  plan_snapshot: Record<string, unknown>;
  status: PlanStatus;
  reviewer_note: string;
  decided_at: number | null;
}

export interface PlanDetail {
  plan_hash: string;
  status: PlanStatus;
  reviewer_note: string;
  plan_canonical: string;
}

export type TaskState = "queued" | "running" | "done" | "failed" | "stopped";

export interface NodeTask {
  task_id: string;
  received_at: number;
  state: TaskState;
  body: {
    experiment_id: string;
    round_index: number;
    dataset_tags: string[];
    [key: string]: unknown;
  };
}

export interface ApiError {
  code: string;
  message: string;
}

export interface DatasetForm {
  display_name: string;
  tags: string[];
  data_type: "tabular" | "folder_image";
  path: string;
  target_column: string;
}
