import functools
import threading
from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from vortex.config import load_config

FIXTURES = Path(__file__).parent / "fixtures"
HISAT2_ID = "toolshed.g2.bx.psu.edu/repos/iuc/hisat2/1.0.0"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def worked_config():
    return load_config([FIXTURES / "worked_example.yml"])


class _QuietHandler(SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass


class FileServer:
    """Serves a directory over HTTP on localhost; ``stop()`` makes it unreachable."""

    def __init__(self, root: Path):
        self.root = root
        handler = functools.partial(_QuietHandler, directory=str(root))
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.running = True

    def url(self, name: str) -> str:
        return f"http://127.0.0.1:{self.port}/{name}"

    def stop(self) -> None:
        if self.running:
            self._server.shutdown()
            self._server.server_close()
            self.running = False


@pytest.fixture
def file_server(tmp_path):
    root = tmp_path / "www"
    root.mkdir()
    server = FileServer(root)
    yield server
    server.stop()
