"""Shared test utilities: the finite-difference gradient oracle and a
throwaway chat-completion server for exercising the LLM client."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

import numpy as np

from serlab import numerics as nm


def finite_difference_grads(
    f: Callable[[dict[str, np.ndarray]], float],
    arrays: dict[str, np.ndarray],
    h: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference gradients of scalar f w.r.t. every array entry."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def check_gradients(
    build_loss: Callable[[nm.ParamStore], nm.Tensor],
    arrays: dict[str, np.ndarray],
    rtol: float = 1e-6,
    h: float = 1e-6,
) -> None:
    """Assert analytic gradients match the finite-difference oracle.

    The error is max-norm relative to max(1, |numeric|) per tensor, so tiny
    gradients are compared absolutely and large ones relatively.
    """
    store = nm.ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    loss = build_loss(store)
    nm.backward(loss, store)
    analytic = store.grads

    def f(arrs: dict[str, np.ndarray]) -> float:
        s = nm.ParamStore()
        for name, arr in arrs.items():
            s.add(name, arr)
        return build_loss(s).item()

    numeric = finite_difference_grads(f, arrays, h=h)
    for name in arrays:
        a, n = analytic[name], numeric[name]
        scale = max(1.0, float(np.max(np.abs(n))))
        err = float(np.max(np.abs(a - n))) / scale
        assert err < rtol, f"gradient mismatch for {name!r}: rel err {err:.3e}"


class MockChatServer:
    """Local OpenAI-shaped chat-completion endpoint with a request counter."""

    def __init__(self, responder: Callable[[str], str]) -> None:
        self.requests: list[str] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                prompt = body["messages"][0]["content"]
                outer.requests.append(prompt)
                reply = json.dumps(
                    {"choices": [{"message": {"content": responder(prompt)}}]}
                ).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(reply)))
                self.end_headers()
                self.wfile.write(reply)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self._server.server_port}"

    def shutdown(self) -> None:
        self._server.shutdown()
        self._thread.join(timeout=5)
