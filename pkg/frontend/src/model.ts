// Pure view-model logic, kept DOM-free so it is directly unit-testable.

import { sha256Hex } from "./sha256.js";
import type { DatasetForm, NodeTask, PlanStatus } from "./types.js";

export interface TreeNode {
  label: string;
  children: TreeNode[];
}

/** Render the hashed plan document as a label tree. The tree is built from
 * the exact canonical bytes the hash covers, so what the reviewer reads is
 * what they approve. */
export function planTree(canonicalText: string): TreeNode {
  const doc = JSON.parse(canonicalText);
  return toNode("plan", doc);
}

function toNode(label: string, value: unknown): TreeNode {
  if (value === null || typeof value !== "object") {
    return { label: `${label}: ${JSON.stringify(value)}`, children: [] };
  }
  if (Array.isArray(value)) {
    if (value.length === 0) {
      return { label: `${label}: (none)`, children: [] };
    }
    return {
      label,
      children: value.map((item, i) => toNode(`${i + 1}`, item)),
    };
  }
  const entries = Object.entries(value as Record<string, unknown>);
  return { label, children: entries.map(([k, v]) => toNode(k, v)) };
}

export type Integrity = "ok" | "mismatch";

/** Recompute the plan hash from the served canonical bytes and compare to
 * the server's claim; a mismatch must block the review controls. */
export async function checkIntegrity(
  canonicalText: string,
  claimedHash: string,
): Promise<Integrity> {
  const recomputed = await sha256Hex(canonicalText);
  return recomputed === claimedHash.toLowerCase() ? "ok" : "mismatch";
}

export interface FormValidation {
  valid: boolean;
  errors: Partial<Record<keyof DatasetForm, string>>;
}

export function validateDatasetForm(form: DatasetForm): FormValidation {
  const errors: FormValidation["errors"] = {};
  if (form.tags.length === 0) {
    errors.tags = "at least one tag is required";
  }
  if (form.path.trim() === "") {
    errors.path = "path must not be blank";
  }
  if (form.display_name.trim() === "") {
    errors.display_name = "name must not be blank";
  }
  if (form.data_type === "tabular" && form.target_column.trim() === "") {
    errors.target_column = "tabular datasets need a target column";
  }
  return { valid: Object.keys(errors).length === 0, errors };
}

/** Normalize free-typed tag input ("a, b" / "a b" etc.) into unique chips. */
export function parseTags(raw: string): string[] {
  const seen = new Set<string>();
  for (const part of raw.split(/[,\s]+/)) {
    const tag = part.trim();
    if (tag !== "") seen.add(tag);
  }
  return Array.from(seen);
}

export function statusBadgeClass(status: PlanStatus): string {
  return { pending: "badge-pending", approved: "badge-approved", rejected: "badge-rejected" }[status];
}

export interface TaskView {
  headline: string;
  detail: string;
  stoppable: boolean;
}

/** The live panel shows the newest task, preferring a running one. */
export function activeTaskView(tasks: NodeTask[]): TaskView {
  if (tasks.length === 0) {
    return { headline: "no active task", detail: "", stoppable: false };
  }
  const running = tasks.filter((t) => t.state === "running");
  const task = running.length > 0 ? running[running.length - 1]! : tasks[tasks.length - 1]!;
  const body = task.body;
  const detail = `experiment ${body.experiment_id}, round ${body.round_index}, tags ${body.dataset_tags.join(",")}`;
  if (task.state === "running") {
    return { headline: "Running", detail, stoppable: true };
  }
  return { headline: capitalized(task.state), detail, stoppable: false };
}

function capitalized(word: string): string {
  return word.charAt(0).toUpperCase() + word.slice(1);
}
