"""Thin HTTP client for the service.

Without a server URL, requests run against an in-process app over an ASGI
transport, so every CLI invocation stays an isolated process with the exact
HTTP surface a remote deployment would see. Point ``server`` (or the
PAVAD_SERVER environment variable) at a running instance to go remote; paths
in requests are then interpreted on the server's filesystem.
"""

from __future__ import annotations

import os

import httpx

SERVER_ENV = "PAVAD_SERVER"


class ServiceError(RuntimeError):
    def __init__(self, status_code: int, detail: str):
        self.status_code = status_code
        self.detail = detail
        super().__init__(f"service error {status_code}: {detail}")


class ServiceClient:
    def __init__(self, server: str | None = None, timeout: float | None = None):
        server = server or os.environ.get(SERVER_ENV) or None
        if server:
            self._http: httpx.Client = httpx.Client(base_url=server.rstrip("/"), timeout=timeout)
        else:
            import warnings

            from .service import create_app

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient
            self._http = TestClient(create_app(), raise_server_exceptions=False)

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ServiceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _call(self, method: str, path: str, payload: dict | None = None) -> dict:
        resp = self._http.request(method, path, json=payload)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise ServiceError(resp.status_code, str(detail))
        return resp.json()

    def health(self) -> dict:
        return self._call("GET", "/v1/health")

    def simulate(self, payload: dict) -> dict:
        return self._call("POST", "/v1/simulate", payload)

    def train(self, payload: dict) -> dict:
        return self._call("POST", "/v1/train", payload)

    def evaluate(self, payload: dict) -> dict:
        return self._call("POST", "/v1/evaluate", payload)

    def ablate(self, payload: dict) -> dict:
        return self._call("POST", "/v1/ablate", payload)

    def grad_check(self, payload: dict) -> dict:
        return self._call("POST", "/v1/grad-check", payload)

    def select_inits(self, payload: dict) -> dict:
        return self._call("POST", "/v1/curation/select-inits", payload)

    def refine_prompts(self, payload: dict) -> dict:
        return self._call("POST", "/v1/curation/refine-prompts", payload)

    def gen_manifest(self, payload: dict) -> dict:
        return self._call("POST", "/v1/curation/gen-manifest", payload)
