"""Command-line interface.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from ..meshproxy import ConfigError
from ..optim import NumericError
from .config import RunConfig, load_config
from .dataset import DatasetError

COMMANDS = ("gen", "stage1", "extract-mesh", "pretrain-cache", "stage2", "render", "relight", "ao", "metrics")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rotinv", description="Rotated-light inverse rendering pipeline.")
    p.add_argument("command", choices=COMMANDS, metavar="command", help=" | ".join(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--data", help="dataset directory (overrides the config)")
    p.add_argument("--backend", choices=("mesh", "gaussian"), help="incident-light backend")
    p.add_argument("--lights", help="comma-separated light indices used for stage 2")
    p.add_argument("--offset", type=float, help="ray origin offset factor for the Gaussian backend")
    p.add_argument("--env", help="environment map (PFM) for relighting")
    p.add_argument("--angle", type=float, default=0.0, help="environment rotation in degrees for relighting")
    p.add_argument("--samples", type=int, help="Monte Carlo samples per pixel")
    p.add_argument("--quiet", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.data is not None:
        cfg.data = args.data
    if args.backend is not None:
        cfg.stage2.backend = args.backend
    if args.offset is not None:
        cfg.stage2.gaussian_offset = args.offset
    if args.lights is not None:
        try:
            cfg.lights = [int(x) for x in args.lights.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--lights must be comma-separated integers, got {args.lights!r}") from None
    return cfg.validate()


def dispatch(command: str, cfg: RunConfig, args) -> None:
    from .run import Run

    log = (lambda *a: None) if args.quiet else (lambda m: print(m, file=sys.stderr))
    r = Run(cfg, log)
    if command == "gen":
        r.gen()
    elif command == "stage1":
        r.stage1()
    elif command == "extract-mesh":
        r.extract_mesh()
    elif command == "pretrain-cache":
        r.pretrain()
    elif command == "stage2":
        r.stage2()
    elif command == "render":
        r.render(cfg.stage2.backend, args.samples)
    elif command == "relight":
        r.relight(args.env, args.angle, args.samples)
    elif command == "ao":
        r.ao(cfg.stage2.backend, cfg.stage2.gaussian_offset, args.samples)
    elif command == "metrics":
        rep = r.metrics()
        for k, v in rep.aggregate().items():
            print(f"{k} {v:.6f}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        dispatch(args.command, cfg, args)
    except (ConfigError, DatasetError, FileNotFoundError) as e:
        print(f"rotinv: error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"rotinv: numeric failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
