"""Talk to a running ``mctree serve`` instance."""

from __future__ import annotations

import time

import httpx

from .schemas import ExpandRequest, ExpandResponse, RunRequest, RunStatus

FINAL_STATES = {"finished", "stopped", "failed"}


class Client:
    def __init__(self, base_url: str, transport=None, timeout: float = 30.0):
        self.http = httpx.Client(base_url=base_url.rstrip("/"), transport=transport, timeout=timeout)

    def close(self):
        self.http.close()

    def _json(self, resp: httpx.Response):
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail")
            except ValueError:
                detail = resp.text
            raise RuntimeError(f"server answered {resp.status_code}: {detail}")
        return resp.json()

    def expand(self, req: ExpandRequest) -> ExpandResponse:
        return ExpandResponse.model_validate(self._json(self.http.post("/expand", json=req.model_dump())))

    def submit(self, req: RunRequest) -> RunStatus:
        return RunStatus.model_validate(self._json(self.http.post("/runs", json=req.model_dump())))

    def status(self, run_id: str) -> RunStatus:
        return RunStatus.model_validate(self._json(self.http.get(f"/runs/{run_id}")))

    def stop(self, run_id: str) -> RunStatus:
        return RunStatus.model_validate(self._json(self.http.post(f"/runs/{run_id}/stop")))

    def text(self, run_id: str, what: str) -> str:
        resp = self.http.get(f"/runs/{run_id}/{what}")
        if resp.status_code >= 400:
            self._json(resp)
        return resp.text

    def wait(self, run_id: str, poll: float = 0.5, on_progress=None) -> RunStatus:
        while True:
            status = self.status(run_id)
            if on_progress:
                on_progress(status)
            if status.state in FINAL_STATES:
                return status
            time.sleep(poll)
