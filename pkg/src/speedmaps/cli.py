"""Command-line interface.

Batch operations (synth, train, eval, adapt) run in-process. The
inference/analysis subcommands (predict, timeseries, motion-model,
travel-times, plot-uncertainty, plot-time-embedding) run in-process by
default, or act as thin clients against a running `speedmaps serve`
instance when --server is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

DTS_CONVERT_DOC = """\
Mapping a real dynamic-traffic-speeds export onto this dataset layout
=====================================================================

Expected source material:
  * segment-level mean speeds (km/h) aggregated per (day-of-week, hour),
    each with an observation count, keyed by a stable segment id;
  * road centerline geometry per segment (any planar or geographic CRS);
  * georeferenced overhead imagery covering the segments.

Produce, under a dataset root:
  manifest.json
      city, web-mercator region bounds (meters), resolution (m/px),
      tile_size, seed, and the tile list with split tags and per-tile
      bounds. Tiles are square, non-overlapping, and split 85/5/10.
  tiles/<id>/image.png
      8-bit RGB crop of the imagery for the tile bounds.
  tiles/<id>/segments.jsonl
      one JSON object per segment intersecting the tile:
        {"id": <int >= 1>,
         "polyline": [[easting_m, northing_m], ...]   # web mercator,
         "observations": {"<day>,<hour>": [speed_kmh, count], ...}}
      day in 0..6 (0 = Monday), hour in 0..23, count >= 1.

Reproject geometry to web mercator (EPSG:3857) before writing; speeds in
km/h. This subcommand documents the mapping only: conversion needs the
proprietary source exports, which are not distributable.
"""


def _err(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _parse_list(text: str, cast=str) -> tuple:
    text = text.strip()
    if not text or text.lower() == "none":
        return ()
    return tuple(cast(part.strip()) for part in text.split(",") if part.strip())


def _parse_times(text: str) -> tuple[tuple[int, int], ...]:
    # "0:8,5:17" -> ((0, 8), (5, 17))
    out = []
    for part in _parse_list(text):
        day_s, hour_s = part.split(":")
        out.append((int(day_s), int(hour_s)))
    return tuple(out)


def build_train_config(args) -> "TrainConfig":
    from .train import TrainConfig

    values: dict = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a flat JSON object")
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    overrides = {
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "accum_steps": args.accum_steps,
        "seed": args.seed,
        "decoder_dim": args.decoder_dim,
        "heads": args.heads,
        "gtpe_stride": args.gtpe_stride,
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    if args.context is not None:
        values["context"] = _parse_list(args.context)
    if args.tasks is not None:
        values["tasks"] = _parse_list(args.tasks)
    if args.channels is not None:
        values["channels"] = _parse_list(args.channels, int)
    if args.stem_channels is not None:
        values["stem_channels"] = _parse_list(args.stem_channels, int)
    if args.mbconv_depths is not None:
        values["mbconv_depths"] = _parse_list(args.mbconv_depths, int)
    if args.mhsa_depths is not None:
        values["mhsa_depths"] = _parse_list(args.mhsa_depths, int)
    if args.no_image:
        values["use_image"] = False
    for key in ("context", "tasks", "channels", "stem_channels", "mbconv_depths", "mhsa_depths"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    config = TrainConfig(**values)
    config.validate()
    return config


# ------------------------------------------------------------ subcommands


def cmd_synth(args) -> int:
    from .data import SynthSpec, synth_city

    spec = SynthSpec(
        seed=args.seed,
        name=args.name,
        tiles=args.tiles,
        tile_size=args.size,
        resolution=args.resolution,
        origin_easting=args.origin_easting,
        origin_northing=args.origin_northing,
        speed_offset=args.speed_offset,
        observe_rate=args.observe_rate,
        noise_sigma=args.noise_sigma,
        rush_hours=tuple(args.rush_hours),
    )
    dataset = synth_city(spec, args.out)
    counts = {s: len(dataset.tile_ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {args.tiles} tiles to {args.out} (splits: {counts})")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .train import train

    config = build_train_config(args)
    dataset = load_dataset(args.dataset)
    result = train(config, dataset, args.out, resume_from=args.resume)
    rmse = "n/a" if result.best_val_rmse is None else f"{result.best_val_rmse:.3f}"
    print(f"best checkpoint: {result.best_checkpoint} (val RMSE {rmse})")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluate import DEFAULT_MACRO_TIMES, evaluate_macro, evaluate_micro
    from .train import load_checkpoint

    dataset = load_dataset(args.dataset)
    model, _ = load_checkpoint(args.checkpoint)
    if args.strategy == "micro":
        report = evaluate_micro(model, dataset, split=args.split, seed=args.seed)
    else:
        times = _parse_times(args.times) if args.times else DEFAULT_MACRO_TIMES
        report = evaluate_macro(model, dataset, split=args.split, times=times)
    doc = report.as_dict()
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    print(text)
    return 0


def cmd_adapt(args) -> int:
    from .adapt import AdaptConfig, adapt_location
    from .data import load_dataset

    dataset = load_dataset(args.dataset)
    config = AdaptConfig(
        lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    )
    out = adapt_location(args.checkpoint, dataset, config, args.out)
    print(f"adapted checkpoint: {out}")
    return 0


def _local_service(args):
    from .api.server import ModelService

    return ModelService(args.checkpoint, args.dataset)


def _post(server: str, path: str, payload: dict) -> dict:
    import httpx

    response = httpx.post(server.rstrip("/") + path, json=payload, timeout=600.0)
    if response.status_code != 200:
        raise RuntimeError(f"server returned {response.status_code}: {response.text}")
    return response.json()


def _get(server: str, path: str) -> dict:
    import httpx

    response = httpx.get(server.rstrip("/") + path, timeout=600.0)
    if response.status_code != 200:
        raise RuntimeError(f"server returned {response.status_code}: {response.text}")
    return response.json()


def cmd_predict(args) -> int:
    from .viz import b64_png, save_gray_png

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.server:
        doc = _post(
            args.server,
            "/predict",
            {
                "tile_id": args.tile,
                "day": args.day,
                "hour": args.hour,
                "include_rasters": True,
            },
        )
        rasters = doc["rasters"]
        (out_dir / "mu.png").write_bytes(b64_png(rasters["mu_png"]))
        (out_dir / "road.png").write_bytes(b64_png(rasters["road_png"]))
        (out_dir / "orientation.png").write_bytes(b64_png(rasters["orientation_png"]))
        estimates = doc["estimates"]
        meta = {
            "tile_id": doc["tile_id"],
            "day": doc["day"],
            "hour": doc["hour"],
            "mu_range_kmh": rasters["mu_range"],
            "road_fraction": doc["road_fraction"],
        }
    else:
        from .apps import aggregate_prediction, predict_dense

        service = _local_service(args)
        bundle = service.bundle(args.tile)
        dense = predict_dense(service.model, bundle, service.region, args.day, args.hour)
        save_gray_png(dense.mu, out_dir / "mu.png")
        save_gray_png(dense.sigma, out_dir / "sigma.png")
        save_gray_png(dense.road_prob, out_dir / "road.png", 0.0, 1.0)
        save_gray_png(dense.orientation_bins, out_dir / "orientation.png", 0, dense.num_bins - 1)
        observed = bundle.observations_at(args.day, args.hour)
        estimates = []
        for est in aggregate_prediction(dense, bundle):
            obs = observed.get(est.segment_id)
            estimates.append(
                {
                    "segment_id": est.segment_id,
                    "mu_kmh": est.mu_bar,
                    "sigma_kmh": est.sigma_bar,
                    "pixel_count": est.pixel_count,
                    "observed_kmh": obs[0] if obs else None,
                    "observed_count": obs[1] if obs else None,
                }
            )
        meta = {
            "tile_id": args.tile,
            "day": args.day,
            "hour": args.hour,
            "mu_range_kmh": [float(dense.mu.min()), float(dense.mu.max())],
            "road_fraction": float((dense.road_prob > 0.5).mean()),
        }
    with open(out_dir / "estimates.csv", "w", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=[
                "segment_id", "mu_kmh", "sigma_kmh", "pixel_count",
                "observed_kmh", "observed_count",
            ],
        )
        writer.writeheader()
        writer.writerows(estimates)
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote prediction rasters and estimates to {out_dir}")
    return 0


def cmd_timeseries(args) -> int:
    if args.server:
        doc = _post(
            args.server, "/timeseries", {"tile_id": args.tile, "segment_id": args.segment}
        )
        rows = doc["rows"]
    else:
        from .apps import segment_timeseries

        service = _local_service(args)
        bundle = service.bundle(args.tile)
        points = segment_timeseries(service.model, bundle, service.region, args.segment)
        rows = [
            {"day": p.day, "hour": p.hour, "mu_kmh": p.mu_bar, "sigma_kmh": p.sigma_bar}
            for p in points
        ]
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["day", "hour", "mu_kmh", "sigma_kmh"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_motion_model(args) -> int:
    if args.server:
        doc = _post(
            args.server,
            "/motion-model",
            {
                "tile_id": args.tile,
                "day": args.day,
                "hour": args.hour,
                "stride": args.stride,
            },
        )
    else:
        from .apps import export_motion_model, predict_dense

        service = _local_service(args)
        bundle = service.bundle(args.tile)
        dense = predict_dense(service.model, bundle, service.region, args.day, args.hour)
        doc = export_motion_model(dense, bundle, args.stride)
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {len(doc['features'])} arrows to {args.out}")
    return 0


def cmd_travel_times(args) -> int:
    if args.server:
        doc = _post(
            args.server,
            "/travel-times",
            {"tile_id": args.tile, "day": args.day, "hour": args.hour},
        )
        rows = doc["rows"]
    else:
        from .apps import export_travel_times, predict_dense

        service = _local_service(args)
        bundle = service.bundle(args.tile)
        dense = predict_dense(service.model, bundle, service.region, args.day, args.hour)
        rows = [vars(r) for r in export_travel_times(dense, bundle)]
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=["segment_id", "length_m", "mu_bar_kmh", "travel_seconds", "clamped"],
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_plot_time_embedding(args) -> int:
    from .viz import b64_png, save_rgb_png

    if args.server:
        doc = _get(args.server, "/time-embedding")
        Path(args.out).write_bytes(b64_png(doc["image_png"]))
        scores = np.asarray(doc["matrix"])
    else:
        from .apps import time_embedding_image
        from .train import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        emb = time_embedding_image(model)
        save_rgb_png(emb.image, args.out)
        scores = emb.scores
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["day", "hour", "pc1", "pc2", "pc3"])
            for d in range(7):
                for h in range(24):
                    writer.writerow([d, h, *(float(v) for v in scores[d, h])])
    print(f"wrote time-embedding image to {args.out}")
    return 0


def cmd_plot_uncertainty(args) -> int:
    if args.server:
        doc = _post(
            args.server,
            "/uncertainty",
            {
                "tile_id": args.tile,
                "segment_id": args.segment,
                "day": args.day,
                "hour": args.hour,
            },
        )
        speeds, density = doc["speeds"], doc["density"]
        meta = {
            k: doc[k] for k in ("tile_id", "segment_id", "day", "hour",
                                "mu_bar", "sigma_bar", "nu", "observed_kmh")
        }
    else:
        from .apps import uncertainty_curve

        service = _local_service(args)
        bundle = service.bundle(args.tile)
        curve = uncertainty_curve(
            service.model, bundle, service.region, args.segment, args.day, args.hour
        )
        speeds, density = curve.speeds.tolist(), curve.density.tolist()
        meta = {
            "tile_id": args.tile,
            "segment_id": curve.segment_id,
            "day": curve.day,
            "hour": curve.hour,
            "mu_bar": curve.mu_bar,
            "sigma_bar": curve.sigma_bar,
            "nu": curve.nu,
            "observed_kmh": curve.observed_speed,
        }
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["speed_kmh", "density"])
        writer.writerows(zip(speeds, density))
    Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {len(speeds)} density samples to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .api.server import ModelService, create_app

    service = ModelService(args.checkpoint, args.dataset)
    app = create_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_dts_convert(args) -> int:
    print(DTS_CONVERT_DOC)
    return 0


# ------------------------------------------------------------ parser


def _add_server_arg(p) -> None:
    p.add_argument("--server", help="base URL of a running `speedmaps serve`; "
                                    "runs in-process when omitted")


def _add_model_inputs(p, need_dataset=True) -> None:
    p.add_argument("--checkpoint", help="trained checkpoint (.pt)")
    if need_dataset:
        p.add_argument("--dataset", help="dataset root directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speedmaps",
        description="Dense traffic-speed, road, and orientation maps from overhead imagery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic city dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tiles", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--resolution", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthville")
    p.add_argument("--origin-easting", type=float, default=1_000_000.0)
    p.add_argument("--origin-northing", type=float, default=5_000_000.0)
    p.add_argument("--speed-offset", type=float, default=0.0)
    p.add_argument("--observe-rate", type=float, default=0.35)
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--rush-hours", type=float, nargs=2, default=(8.0, 17.0))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat JSON config file (TrainConfig keys)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--accum-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--context", help="comma list of loc,time,loctime or 'none'")
    p.add_argument("--tasks", help="comma list of speed,road,orientation")
    p.add_argument("--no-image", action="store_true", help="ablation: zero the image input")
    p.add_argument("--channels", help="four comma-separated stage widths")
    p.add_argument("--stem-channels", help="two comma-separated stem widths")
    p.add_argument("--mbconv-depths", help="two comma-separated block counts")
    p.add_argument("--mhsa-depths", help="two comma-separated block counts")
    p.add_argument("--decoder-dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--gtpe-stride", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--strategy", default="micro", choices=["micro", "macro"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--times", help="macro times as 'day:hour,day:hour' "
                                   "(default: Monday and Saturday at 12am/4am/8am/12pm/5pm/8pm)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", help="fine-tune only the context pathways on a new city")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("predict", help="dense maps + per-segment estimates for one tile/time")
    _add_model_inputs(p)
    _add_server_arg(p)
    p.add_argument("--tile", required=True)
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--hour", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("timeseries", help="168-hour prediction table for one segment")
    _add_model_inputs(p)
    _add_server_arg(p)
    p.add_argument("--tile", required=True)
    p.add_argument("--segment", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_timeseries)

    p = sub.add_parser("motion-model", help="GeoJSON arrow field of predicted flow")
    _add_model_inputs(p)
    _add_server_arg(p)
    p.add_argument("--tile", required=True)
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--hour", type=int, required=True)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--out", required=True, help="output GeoJSON")
    p.set_defaults(func=cmd_motion_model)

    p = sub.add_parser("travel-times", help="per-segment travel-time CSV")
    _add_model_inputs(p)
    _add_server_arg(p)
    p.add_argument("--tile", required=True)
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--hour", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_travel_times)

    p = sub.add_parser("plot-time-embedding", help="7x24 false-color PCA of the time pathway")
    _add_model_inputs(p, need_dataset=False)
    _add_server_arg(p)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--csv", help="also write raw PCA scores here")
    p.set_defaults(func=cmd_plot_time_embedding)

    p = sub.add_parser("plot-uncertainty", help="per-segment speed density curve")
    _add_model_inputs(p)
    _add_server_arg(p)
    p.add_argument("--tile", required=True)
    p.add_argument("--segment", type=int, required=True)
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--hour", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_plot_uncertainty)

    p = sub.add_parser("serve", help="serve inference/analysis over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser(
        "dts-convert",
        help="document how a real traffic-speed export maps onto this layout",
    )
    p.set_defaults(func=cmd_dts_convert)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    needs_local_model = args.command in (
        "predict", "timeseries", "motion-model", "travel-times", "plot-uncertainty",
    )
    if needs_local_model and not getattr(args, "server", None):
        if not args.checkpoint or not args.dataset:
            return _err(f"{args.command} needs --checkpoint and --dataset (or --server)")
    if args.command == "plot-time-embedding" and not getattr(args, "server", None):
        if not args.checkpoint:
            return _err("plot-time-embedding needs --checkpoint (or --server)")
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single CLI boundary
        return _err(str(e))


if __name__ == "__main__":
    sys.exit(main())
