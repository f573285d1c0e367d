// Dev server for the governance console: serves the static assets and
// bridges JSON-over-HTTP to the node's framed-TCP admin API. The bridge
// adds no authority of its own; every state change is a 1:1 forwarded
// admin command.
//
// Env: GOV_UI_PORT (default 8765), FEDBED_NODE_ADMIN_HOST (127.0.0.1),
//      FEDBED_NODE_ADMIN_PORT (14160).

import express from "express";
import * as fs from "node:fs";
import * as net from "node:net";
import * as path from "node:path";
import { fileURLToPath } from "node:url";

const HERE = path.dirname(fileURLToPath(import.meta.url));

// works both compiled (dist/server/bridge.js) and straight from source
function firstExisting(...candidates: string[]): string {
  return candidates.find((p) => fs.existsSync(p)) ?? candidates[0]!;
}

const PUBLIC_DIR = firstExisting(
  path.resolve(HERE, "..", "..", "public"),
  path.resolve(HERE, "..", "public"),
);
const APP_DIR = firstExisting(
  path.resolve(HERE, "..", "app"),
  path.resolve(HERE, "..", "dist", "app"),
);

export interface AdminReply {
  ok: boolean;
  error?: { code: string; message: string };
  [key: string]: unknown;
}

/** One framed-JSON request/reply exchange with the node admin port.
 * Frames are a 4-byte big-endian length followed by UTF-8 JSON. */
export function adminCall(
  host: string,
  port: number,
  request: Record<string, unknown>,
  timeoutMs = 10_000,
): Promise<AdminReply> {
  return new Promise((resolve, reject) => {
    const socket = net.createConnection({ host, port });
    const chunks: Buffer[] = [];
    let settled = false;
    const fail = (error: Error) => {
      if (!settled) {
        settled = true;
        socket.destroy();
        reject(error);
      }
    };
    socket.setTimeout(timeoutMs, () => fail(new Error("admin API timeout")));
    socket.on("error", fail);
    socket.on("connect", () => {
      const payload = Buffer.from(JSON.stringify(request), "utf-8");
      const header = Buffer.alloc(4);
      header.writeUInt32BE(payload.length, 0);
      socket.write(Buffer.concat([header, payload]));
    });
    socket.on("data", (chunk: Buffer) => {
      chunks.push(chunk);
      const data = Buffer.concat(chunks);
      if (data.length < 4) return;
      const length = data.readUInt32BE(0);
      if (data.length < 4 + length) return;
      settled = true;
      socket.end();
      try {
        resolve(JSON.parse(data.subarray(4, 4 + length).toString("utf-8")));
      } catch (error) {
        reject(error as Error);
      }
    });
    socket.on("close", () => fail(new Error("admin API closed the connection")));
  });
}

export function buildApp(adminHost: string, adminPort: number) {
  const app = express();
  app.use(express.json());

  const forward = (
    makeCommand: (req: express.Request) => Record<string, unknown>,
  ): express.RequestHandler => {
    return async (req, res) => {
      let reply: AdminReply;
      try {
        reply = await adminCall(adminHost, adminPort, makeCommand(req));
      } catch (error) {
        res.status(502).json({
          error: { code: "AdminUnreachable", message: String(error) },
        });
        return;
      }
      if (!reply.ok) {
        res.status(400).json({ error: reply.error });
        return;
      }
      const { ok: _ok, ...rest } = reply;
      res.json(rest);
    };
  };

  app.get("/api/node-info", forward(() => ({ cmd: "node_info" })));
  app.get("/api/datasets", forward(() => ({ cmd: "dataset_list" })));
  app.post("/api/datasets", forward((req) => ({
    cmd: "dataset_add",
    display_name: req.body.display_name,
    tags: req.body.tags,
    data_type: req.body.data_type,
    path: req.body.path,
    target_column: req.body.target_column || null,
    dataset_id: req.body.dataset_id ?? null,
  })));
  app.delete("/api/datasets/:id", forward((req) => ({
    cmd: "dataset_delete",
    dataset_id: req.params.id,
  })));
  app.get("/api/plans", forward(() => ({ cmd: "plan_list" })));
  app.get("/api/plans/:hash", forward((req) => ({
    cmd: "plan_get",
    plan_hash: req.params.hash,
  })));
  app.post("/api/plans/:hash/review", forward((req) => ({
    cmd: "plan_review",
    plan_hash: req.params.hash,
    decision: req.body.decision,
    note: req.body.note ?? "",
  })));
  app.get("/api/tasks", forward(() => ({ cmd: "task_list" })));
  app.post("/api/tasks/stop", forward(() => ({ cmd: "task_stop" })));

  app.use("/app", express.static(APP_DIR));
  app.use("/", express.static(PUBLIC_DIR));
  return app;
}

const entrypoint = process.argv[1] ? path.resolve(process.argv[1]) : "";
if (entrypoint === fileURLToPath(import.meta.url)) {
  const port = Number(process.env.GOV_UI_PORT ?? 8765);
  const adminHost = process.env.FEDBED_NODE_ADMIN_HOST ?? "127.0.0.1";
  const adminPort = Number(process.env.FEDBED_NODE_ADMIN_PORT ?? 14160);
  const app = buildApp(adminHost, adminPort);
  app.listen(port, () => {
    console.log(`governance console: http://127.0.0.1:${port}/ `
      + `(node admin at ${adminHost}:${adminPort})`);
  });
}
