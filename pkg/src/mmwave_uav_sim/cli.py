"""Command line entry point: ``mmwave-uav-sim <command>``.

Exit codes: 0 ok, 2 configuration error, 3 runtime error.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from dotenv import load_dotenv
from loguru import logger
from pydantic import ValidationError

from mmwave_uav_sim import __version__, canonical
from mmwave_uav_sim.channel import ArrayDescriptor
from mmwave_uav_sim.config import ArraySettings, parse_config
from mmwave_uav_sim.dataset import emit_plot_data, export_sql, mimo_from_rays, query_rays, read_dataset
from mmwave_uav_sim.errors import ConfigError, IntegrityError, SimulationError
from mmwave_uav_sim.log import configure_logging
from mmwave_uav_sim.scenario import generate_scenario
from mmwave_uav_sim.simulation import run_simulation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _write_output(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    logger.info(f"Wrote {out}")


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    manifest = run_simulation(cfg, out_dir=args.out, parallel=args.parallel)
    print(manifest.dataset_hash)
    return EXIT_OK


def cmd_generate_scenario(args: argparse.Namespace) -> int:
    scene_path, routes_path = generate_scenario(args.out, args.seed)
    print(scene_path)
    print(routes_path)
    return EXIT_OK


def cmd_export_sql(args: argparse.Namespace) -> int:
    _write_output(export_sql(read_dataset(args.dataset)), args.out)
    return EXIT_OK


def cmd_plot_data(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.dataset)
    text = emit_plot_data(dataset, args.uav, args.episode, metric=args.metric, aggregate=args.aggregate)
    _write_output(text, args.out)
    return EXIT_OK


def cmd_mimo(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.dataset)
    receiver = next((r for r in dataset.receivers if r.receiver_id == args.receiver), None)
    if receiver is None:
        raise IntegrityError(f"Unknown receiver {args.receiver}")
    scene = next(s for s in dataset.scenes if s.scene_id == receiver.scene_id)
    episode = next(e for e in dataset.episodes if e.episode_id == scene.episode_id)

    try:
        tx_default, rx_default = ArraySettings.model_validate(episode.config.get("arrays", {})).descriptors()
    except ValidationError as e:
        raise ConfigError(f"Episode {episode.episode_id} stores malformed arrays: {e}") from e
    tx_array = ArrayDescriptor.load(args.tx_array) if args.tx_array else tx_default
    rx_array = ArrayDescriptor.load(args.rx_array) if args.rx_array else rx_default

    rays = query_rays(dataset, receiver_id=args.receiver)
    channel = mimo_from_rays(rays, tx_array, rx_array, float(episode.config["frequency"]))
    logger.info(
        f"[rx {args.receiver}] {len(rays)} rays -> {len(rx_array)}x{len(tx_array)} H, rank {channel.rank}"
    )
    print(canonical.dumps({**channel.to_dict(), "rank": channel.rank}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmwave-uav-sim",
        description="Ray-traced 60 GHz channel datasets between a ground transmitter and UAV receivers",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        default=None,
        help="Log level (default: MMWAVE_LOG_LEVEL or INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Run every episode of a config and write the dataset")
    p.add_argument("--config", type=Path, required=True, help="JSON run config")
    p.add_argument("--out", type=Path, default=None, help="Dataset directory (default: config output_dir)")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")
    p.add_argument("--parallel", type=int, default=1, help="Worker processes tracing scenes")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate-scenario", help="Write the canonical scene.json and routes.json")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--seed", type=int, required=True, help="Scenario seed")
    p.set_defaults(func=cmd_generate_scenario)

    p = sub.add_parser("export-sql", help="Export a dataset as SQL DDL plus INSERT statements")
    p.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    p.add_argument("--out", type=Path, default=None, help="SQL file (default: stdout)")
    p.set_defaults(func=cmd_export_sql)

    p = sub.add_parser("plot-data", help="Power or delay versus time for one UAV as CSV")
    p.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    p.add_argument("--uav", type=int, required=True, help="UAV id")
    p.add_argument("--episode", type=int, required=True, help="Episode id")
    p.add_argument("--metric", choices=["power", "delay"], default="power")
    p.add_argument("--aggregate", choices=["coherent", "noncoherent"], default="coherent")
    p.add_argument("--out", type=Path, default=None, help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("mimo", help="Narrowband MIMO matrix of one stored receiver as JSON")
    p.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    p.add_argument("--receiver", type=int, required=True, help="Receiver id")
    p.add_argument("--tx-array", type=Path, default=None, help="Tx array descriptor JSON")
    p.add_argument("--rx-array", type=Path, default=None, help="Rx array descriptor JSON")
    p.set_defaults(func=cmd_mimo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the CLI."""
    load_dotenv(override=False)
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (SimulationError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
