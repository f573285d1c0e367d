// Bootstrap: wire the three panels and poll the node at 1 Hz.

import { GovApi } from "./api.js";
import {
  renderDatasets,
  renderPlans,
  renderTasks,
  setConnectionState,
  wireDatasetForm,
} from "./views.js";

const POLL_INTERVAL_MS = 1000;

async function start(): Promise<void> {
  const api = GovApi.fromLocation(window.location);
  const plansBox = document.getElementById("plans")!;
  const datasetsBox = document.getElementById("datasets")!;
  const tasksBox = document.getElementById("tasks")!;
  const form = document.getElementById("dataset-form") as HTMLFormElement;

  let refreshing = false;
  const refresh = async () => {
    if (refreshing) return;
    refreshing = true;
    try {
      const [info, plans, datasets, tasks] = await Promise.all([
        api.nodeInfo(), api.listPlans(), api.listDatasets(), api.listTasks(),
      ]);
      document.getElementById("node-id")!.textContent = info.node_id;
      await renderPlans(api, plansBox, plans, () => void refresh());
      renderDatasets(api, datasetsBox, datasets, () => void refresh());
      renderTasks(api, tasksBox, tasks, () => void refresh());
      setConnectionState(true);
    } catch {
      setConnectionState(false);
    } finally {
      refreshing = false;
    }
  };

  wireDatasetForm(api, form, () => void refresh());
  await refresh();
  setInterval(() => void refresh(), POLL_INTERVAL_MS);
}

void start();
