import { describe, expect, it } from "vitest";

import { ApiError, HttpApi } from "../src/api.js";

function respond(status: number, body: unknown): typeof fetch {
  return async () =>
    new Response(JSON.stringify(body), {
      status,
      headers: { "content-type": "application/json" },
    });
}

describe("HttpApi", () => {
  it("returns parsed payloads on 200", async () => {
    const api = new HttpApi("", respond(200, { rounds: [], converged: false }));
    expect(await api.metrics()).toEqual({ rounds: [], converged: false });
  });

  it("raises ApiError with the server's detail string", async () => {
    const api = new HttpApi("", respond(409, { detail: "fine-tuning in progress" }));
    const err = await api.finetune().then(
      () => null,
      (e: unknown) => e,
    );
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
    expect((err as ApiError).detail).toBe("fine-tuning in progress");
  });

  it("falls back to the status text on a non-JSON error body", async () => {
    const fetchFn: typeof fetch = async () =>
      new Response("<html>boom</html>", { status: 502, statusText: "Bad Gateway" });
    const api = new HttpApi("", fetchFn);
    const err = await api.session().then(
      () => null,
      (e: unknown) => e,
    );
    expect((err as ApiError).status).toBe(502);
    expect((err as ApiError).detail).toBe("Bad Gateway");
  });

  it("targets the configured base and routes", async () => {
    const seen: string[] = [];
    const fetchFn: typeof fetch = async (input, init) => {
      seen.push(`${init?.method ?? "GET"} ${String(input)}`);
      return new Response("{}", { status: 200 });
    };
    const api = new HttpApi("http://localhost:8000", fetchFn);
    await api.session();
    await api.prototypes();
    await api.metrics();
    await api.feedback(3, "img-1", "forbid", "all");
    await api.finetune();
    await api.job("job-1");
    expect(seen).toEqual([
      "GET http://localhost:8000/api/session",
      "GET http://localhost:8000/api/prototypes",
      "GET http://localhost:8000/api/metrics",
      "POST http://localhost:8000/api/feedback",
      "POST http://localhost:8000/api/rounds/finetune",
      "POST http://localhost:8000/api/jobs/job-1".replace("POST", "GET"),
    ]);
    expect(api.overlayUrl("img-2", 5)).toBe(
      "http://localhost:8000/api/images/img-2/overlay/5",
    );
  });

  it("sends the verdict body as JSON", async () => {
    let body: unknown = null;
    const fetchFn: typeof fetch = async (_input, init) => {
      body = JSON.parse(String(init?.body));
      return new Response("{}", { status: 200 });
    };
    const api = new HttpApi("", fetchFn);
    await api.feedback(7, "img-9", "keep", "class");
    expect(body).toEqual({
      prototype: 7,
      image: "img-9",
      decision: "keep",
      scope: "class",
    });
  });
});
