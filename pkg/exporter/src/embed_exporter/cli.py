"""Command-line interface: one export per invocation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .export import KINDS, ExportError, ExportJob, export_embeddings
from .models import ModelLoadError


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export embeddings into the engine's .embs/.ids store format.",
    )
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--input", required=True, help="JSON-lines input")
    parser.add_argument(
        "--model",
        required=True,
        help="model identifier: hash-<dim> for the deterministic built-in, "
        "otherwise a sentence-transformers id such as clip-ViT-B-32",
    )
    parser.add_argument("--out", required=True, help="output store path (.embs)")
    parser.add_argument("--batch", type=int, default=32, help="encode batch size")
    parser.add_argument("--device", default=None, help="inference device hint")
    args = parser.parse_args(argv)

    try:
        job = ExportJob(
            kind=args.kind,
            input_path=Path(args.input),
            model_id=args.model,
            out_path=Path(args.out),
            batch_size=args.batch,
            device=args.device,
        )
        summary = export_embeddings(job)
    except (ExportError, ModelLoadError, ValueError, OSError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary.as_dict()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
