"""Launch an adapter server from the command line."""

from __future__ import annotations

import argparse
import signal
import sys

from .config import AdapterConfig, AdapterError
from .servers import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vla-adapters",
        description="Serve a detection, classification, or chat-proxy adapter.",
    )
    parser.add_argument("--role", required=True, choices=["detector", "classifier", "linguistic"])
    parser.add_argument("--model", default="stub")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--upstream-base")
    parser.add_argument("--upstream-vendor", default="openai",
                        choices=["openai", "anthropic", "gemini"])
    args = parser.parse_args(argv)

    try:
        cfg = AdapterConfig(
            role=args.role,
            model=args.model,
            device=args.device,
            host=args.host,
            port=args.port,
            upstream_base=args.upstream_base,
            upstream_vendor=args.upstream_vendor,
        )
        server = serve(cfg)
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    host, port = server.server_address[:2]
    print(f"{args.role} adapter ({args.model}) listening on http://{host}:{port}")
    stop = []
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    try:
        while not stop:
            signal.pause()
    finally:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
