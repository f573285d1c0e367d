// DOM rendering for the three panels. All state lives on the node; these
// functions re-render from fresh API data on every poll or action.

import type { GovApi } from "./api.js";
import {
  activeTaskView,
  checkIntegrity,
  parseTags,
  planTree,
  statusBadgeClass,
  validateDatasetForm,
  type TreeNode,
} from "./model.js";
import type { DatasetForm, DatasetRecord, NodeTask, PlanRecord } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderTree(node: TreeNode): HTMLElement {
  if (node.children.length === 0) {
    return el("li", "tree-leaf", node.label);
  }
  const li = el("li", "tree-branch");
  li.append(el("span", "tree-label", node.label));
  const ul = el("ul", "tree-children");
  for (const child of node.children) {
    ul.append(renderTree(child));
  }
  li.append(ul);
  return li;
}

// -- plan review queue --------------------------------------------------------

export async function renderPlans(
  api: GovApi, container: HTMLElement, plans: PlanRecord[],
  onDecision: () => void,
): Promise<void> {
  container.replaceChildren();
  if (plans.length === 0) {
    container.append(el("p", "empty-state", "no pending plans"));
    return;
  }
  for (const plan of plans) {
    container.append(await planCard(api, plan, onDecision));
  }
}

async function planCard(
  api: GovApi, plan: PlanRecord, onDecision: () => void,
): Promise<HTMLElement> {
  const card = el("section", "card plan-card");
  card.dataset.planHash = plan.plan_hash;

  const header = el("header", "card-header");
  header.append(el("span", `badge ${statusBadgeClass(plan.status)}`, plan.status));
  header.append(el("code", "plan-hash", plan.plan_hash));
  card.append(header);

  // fetch the canonical bytes and recompute the hash locally
  const detail = await api.getPlan(plan.plan_hash);
  const integrity = await checkIntegrity(detail.plan_canonical, detail.plan_hash);
  if (integrity === "mismatch") {
    const warning = el("div", "integrity-warning",
      "INTEGRITY WARNING: the served plan does not hash to the claimed " +
      "value. Do not approve.");
    warning.dataset.testid = "integrity-warning";
    card.append(warning);
  }

  const treeRoot = el("ul", "tree");
  treeRoot.append(renderTree(planTree(detail.plan_canonical)));
  card.append(treeRoot);

  if (plan.status !== "pending") {
    if (plan.reviewer_note) {
      card.append(el("p", "reviewer-note", `note: ${plan.reviewer_note}`));
    }
    card.classList.add("decided");
    return card;
  }

  const note = el("input", "note-input");
  note.placeholder = "reviewer note";
  const actions = el("div", "actions");
  const approve = el("button", "approve", "Approve");
  const reject = el("button", "reject", "Reject");
  if (integrity === "mismatch") {
    approve.disabled = true;
    reject.disabled = true;
  }
  const decide = (decision: "approved" | "rejected") => async () => {
    approve.disabled = true;
    reject.disabled = true;
    try {
      await api.reviewPlan(plan.plan_hash, decision, note.value);
    } catch (error) {
      showToast(String(error));
    }
    onDecision();
  };
  approve.addEventListener("click", decide("approved"));
  reject.addEventListener("click", decide("rejected"));
  actions.append(approve, reject);
  card.append(note, actions);
  return card;
}

// -- dataset management -------------------------------------------------------

export function renderDatasets(
  api: GovApi, container: HTMLElement, datasets: DatasetRecord[],
  refresh: () => void,
): void {
  container.replaceChildren();
  if (datasets.length === 0) {
    container.append(el("p", "empty-state", "no datasets registered"));
    return;
  }
  const table = el("table", "dataset-table");
  const head = el("tr");
  for (const title of ["name", "tags", "type", "samples", "columns", ""]) {
    head.append(el("th", undefined, title));
  }
  table.append(head);
  for (const dataset of datasets) {
    const row = el("tr");
    row.dataset.datasetId = dataset.dataset_id;
    row.append(el("td", undefined, dataset.display_name));
    const tagCell = el("td");
    for (const tag of dataset.tags) {
      tagCell.append(el("span", "chip", tag));
    }
    row.append(tagCell);
    row.append(el("td", undefined, dataset.data_type));
    row.append(el("td", undefined, String(dataset.sample_count)));
    row.append(el("td", undefined,
      dataset.column_summary ? dataset.column_summary.join(", ") : "-"));
    const deleteCell = el("td");
    const remove = el("button", "delete", "Delete");
    remove.addEventListener("click", async () => {
      try {
        await api.deleteDataset(dataset.dataset_id);
      } catch (error) {
        showToast(String(error));
      }
      refresh();
    });
    deleteCell.append(remove);
    row.append(deleteCell);
    table.append(row);
  }
  container.append(table);
}

export function wireDatasetForm(api: GovApi, form: HTMLFormElement,
                                refresh: () => void): void {
  const read = (): DatasetForm => ({
    display_name: field(form, "name").value,
    tags: parseTags(field(form, "tags").value),
    data_type: field(form, "type").value as DatasetForm["data_type"],
    path: field(form, "path").value,
    target_column: field(form, "target-column").value,
  });
  const submit = form.querySelector("button[type=submit]") as HTMLButtonElement;
  const errorsBox = form.querySelector(".form-errors") as HTMLElement;

  const revalidate = () => {
    const validation = validateDatasetForm(read());
    submit.disabled = !validation.valid;
    errorsBox.replaceChildren();
    for (const [fieldName, message] of Object.entries(validation.errors)) {
      errorsBox.append(el("p", "field-error", `${fieldName}: ${message}`));
    }
  };
  form.addEventListener("input", revalidate);
  revalidate();

  form.addEventListener("submit", async (event) => {
    event.preventDefault();
    try {
      await api.addDataset(read());
      form.reset();
      revalidate();
    } catch (error) {
      errorsBox.replaceChildren(el("p", "field-error", String(error)));
    }
    refresh();
  });
}

function field(form: HTMLFormElement, name: string): HTMLInputElement {
  return form.querySelector(`[name=${name}]`) as HTMLInputElement;
}

// -- task panel ----------------------------------------------------------------

export function renderTasks(api: GovApi, container: HTMLElement,
                            tasks: NodeTask[], refresh: () => void): void {
  container.replaceChildren();
  const view = activeTaskView(tasks);
  const headline = el("p", `task-state task-${view.headline.toLowerCase()}`,
    view.headline);
  headline.dataset.testid = "task-state";
  container.append(headline);
  if (view.detail) {
    container.append(el("p", "task-detail", view.detail));
  }
  const stop = el("button", "stop", "Stop");
  stop.disabled = !view.stoppable;
  stop.addEventListener("click", async () => {
    stop.disabled = true;
    try {
      await api.stopTask();
    } catch (error) {
      showToast(String(error));
    }
    refresh();
  });
  container.append(stop);
}

// -- shared chrome --------------------------------------------------------------

export function setConnectionState(ok: boolean): void {
  const banner = document.getElementById("connection-banner");
  if (!banner) return;
  banner.textContent = ok ? "" : "node admin API unreachable - data may be stale";
  banner.className = ok ? "banner hidden" : "banner banner-error";
  for (const button of document.querySelectorAll("button")) {
    if (!ok) button.setAttribute("data-was-disabled", String(button.disabled));
    if (!ok) button.disabled = true;
  }
}

export function showToast(message: string): void {
  const toast = document.getElementById("toast");
  if (!toast) return;
  toast.textContent = message;
  toast.classList.remove("hidden");
  setTimeout(() => toast.classList.add("hidden"), 4000);
}
