"""``lvmae`` command line: one subcommand per pipeline stage.

Exit status is 0 on success, 2 on configuration errors and 1 on runtime
failures; errors go to stderr as ``error_code=<code> <message>``.
"""
from __future__ import annotations

import argparse
import json
import sys

from ..masking import BudgetError
from ..numerics.checkpoint import CheckpointError
from ..numerics.tensor import NonFiniteError
from ..video import FormatError, GeometryError
from . import config as cfgmod
from .runs import STAGES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvmae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for name in STAGES:
        p = sub.add_parser(name, help=STAGES[name].__doc__.splitlines()[0] if STAGES[name].__doc__ else name)
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="base preset (default desk)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; VALUE is parsed as JSON, else taken as a string")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return parser


def _fail(code: str, message, status: int) -> int:
    print(f"error_code={code} {message}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config, args.overrides, preset=args.preset)
    except cfgmod.ConfigError as exc:
        return _fail(exc.code, exc, 2)
    if args.print_config:
        print(cfgmod.dumps(cfg))
        return 0
    try:
        manifest = STAGES[args.stage](cfg)
    except cfgmod.ConfigError as exc:
        return _fail(exc.code, exc, 2)
    except NonFiniteError as exc:
        return _fail("non_finite", exc, 1)
    except (GeometryError, BudgetError) as exc:
        return _fail("bad_geometry" if isinstance(exc, GeometryError) else "bad_budget", exc, 1)
    except (FormatError, CheckpointError) as exc:
        return _fail("bad_format", exc, 1)
    except OSError as exc:
        return _fail("io_error", exc, 1)
    except (ValueError, KeyError) as exc:
        return _fail("runtime_error", exc, 1)
    print(json.dumps({"stage": manifest.stage, "outputs": manifest.outputs, "summary": manifest.summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
