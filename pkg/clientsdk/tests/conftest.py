from __future__ import annotations

import socket
import subprocess
import sys
import time
import urllib.request

import pytest


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _spawn(scenario: str, seed: int = 7):
    port = _free_port()
    proc = subprocess.Popen(
        [
            sys.executable, "-m", "qkdnet.cli", "serve",
            "--scenario", scenario, "--seed", str(seed),
            "--bind", f"127.0.0.1:{port}", "--manual-clock",
        ],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE,
    )
    base = f"http://127.0.0.1:{port}"
    deadline = time.time() + 30
    while time.time() < deadline:
        if proc.poll() is not None:
            out, err = proc.communicate()
            raise RuntimeError(f"serve died: {err.decode()}")
        try:
            urllib.request.urlopen(f"{base}/healthz", timeout=1)
            return proc, base
        except OSError:
            time.sleep(0.1)
    proc.kill()
    raise RuntimeError("serve did not come up in time")


@pytest.fixture()
def served_madqci():
    proc, base = _spawn("madqci.scenario", seed=7)
    yield base
    proc.terminate()
    proc.communicate(timeout=20)


@pytest.fixture()
def served_rawdemo():
    proc, base = _spawn("rawdemo.scenario", seed=5)
    yield base
    proc.terminate()
    proc.communicate(timeout=20)
