"""Command-line entry point.

Every command reads one JSON run config (omitted sections keep their
defaults), takes its file inputs and outputs as explicit flags, and writes a
``*.meta.json`` sidecar naming the command, the resolved config hash, and the
parameters next to each output, so any artifact can be traced back to the
exact invocation that produced it. Commands share no hidden state; they
compose only through the files they read and write.

Exit codes: 0 on success, 1 on a user error (bad flags, malformed inputs,
missing files), 2 on an internal failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .clients import HttpTransport, ModelClient, ScriptedTransport, TransportError
from .config import RunConfig, load_run_config, run_config_hash, run_config_json
from .curation import CurationThresholds, curate, load_manifest, save_json
from .diffusion import multi_person_sample
from .model import PersonaModel, load_model, save_model
from .pngio import read_image, read_mask, read_parse_grid, write_image
from .regions import ParseMap, RegionGrouping, decompose
from .scoring import ScoreTemplates, evaluate_manifest
from .synthetic import SyntheticIdentitySpec, caption_match, gen_synthetic, identity_color_error
from .training import Trainer, build_dataset

MOCK_TRANSPORT_ENV = "BODYFORGE_MOCK_TRANSPORT"

ABLATION_AXES = ("token_len", "identity_scale", "blocks", "timesteps")

_USER_ERRORS = (
    ValueError,
    KeyError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    PermissionError,
    TransportError,
    CheckpointError,
)


# -- shared plumbing ---------------------------------------------------------


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def _write_sidecar(path: Path, command: str, config: RunConfig, parameters: dict) -> None:
    payload = {
        "command": command,
        "config_hash": run_config_hash(config),
        "parameters": parameters,
    }
    save_json(path, payload)


def _file_sidecar(path) -> Path:
    return Path(str(path) + ".meta.json")


def _dir_sidecar(directory) -> Path:
    return Path(directory) / "run_meta.json"


def _client(args, config: RunConfig) -> ModelClient:
    """Mock transport beats live HTTP; the env var beats both flags."""
    script = os.environ.get(MOCK_TRANSPORT_ENV) or getattr(args, "mock_transport", None)
    if script:
        return ModelClient(ScriptedTransport.from_json(script))
    endpoint = getattr(args, "endpoint", None)
    if endpoint:
        return ModelClient(HttpTransport(endpoint))
    raise ValueError(
        f"no model transport configured; pass --mock-transport or --endpoint, "
        f"or set {MOCK_TRANSPORT_ENV}"
    )


def _load_region_set(member: dict, default_scheme: str | None, region_size: int):
    path = member.get("path")
    parse_path = member.get("parse_path")
    mask_path = member.get("mask_path")
    if not (path and parse_path and mask_path):
        raise ValueError("identity image needs path, parse_path, and mask_path")
    scheme = member.get("label_scheme_id") or default_scheme
    if not scheme:
        raise ValueError(f"{path}: no label scheme for the parse grid")
    grouping = RegionGrouping.builtin(scheme)
    parse = ParseMap(read_parse_grid(parse_path), scheme)
    return decompose(
        read_image(path), parse, read_mask(mask_path), grouping,
        target_size=(region_size, region_size),
    )


def _find_individual(manifest: dict, identity: str) -> dict:
    for person in manifest.get("individuals", []):
        if person.get("id") == identity:
            return person
    raise ValueError(f"identity {identity!r} not in manifest")


def _member(person: dict, index: int) -> dict:
    images = person.get("images", [])
    if not 0 <= index < len(images):
        raise ValueError(
            f"image index {index} out of range for {person.get('id')!r} ({len(images)} images)"
        )
    return images[index]


# -- commands -----------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    config = _load_config(args)
    image_size = args.image_size if args.image_size is not None else config.model.image_size
    seed = args.seed if args.seed is not None else config.seed
    spec = SyntheticIdentitySpec(
        image_size=image_size,
        images_per_identity=args.images_per_identity,
        jitter=args.jitter,
    )
    out_dir = Path(args.out)
    manifest = gen_synthetic(spec, args.n_identities, seed, out_dir)
    n_images = sum(len(p["images"]) for p in manifest["individuals"])
    _write_sidecar(
        _dir_sidecar(out_dir),
        "gen-synthetic",
        config,
        {
            "out": str(out_dir),
            "n_identities": args.n_identities,
            "images_per_identity": args.images_per_identity,
            "image_size": image_size,
            "jitter": args.jitter,
            "seed": seed,
        },
    )
    print(f"wrote {args.n_identities} identities ({n_images} images) to {out_dir}")
    return 0


def cmd_curate(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    client = _client(args, config)
    thresholds = CurationThresholds(
        face_sim_min=config.curation.face_sim_min,
        min_short_side=config.curation.min_short_side,
        window=config.curation.window,
        stride=config.curation.stride,
    )
    curated, report = curate(manifest, thresholds, client, max_in_flight=config.curation.max_in_flight)
    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.parent / (out.stem + ".report.json")
    save_json(out, curated)
    save_json(report_path, report)
    _write_sidecar(
        _file_sidecar(out),
        "curate",
        config,
        {"manifest": str(args.manifest), "out": str(out), "report": str(report_path)},
    )
    print(
        f"kept {report['kept_individuals']}/{report['total_individuals']} individuals "
        f"({report['kept_images']} images); report at {report_path}"
    )
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    schedule = config.schedule.build()
    phases = config.training.phase_specs()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"
    checkpoint_path = out_dir / "checkpoint.bfck"
    model_path = out_dir / "model.bfck"

    if args.resume:
        dataset = build_dataset(manifest, PersonaModel(config.model, seed=config.seed))
        trainer = Trainer.resume(checkpoint_path, dataset, schedule, log_path=log_path)
    else:
        if log_path.exists():
            log_path.unlink()
        model = PersonaModel(config.model, seed=config.seed)
        dataset = build_dataset(manifest, model)
        trainer = Trainer(model, dataset, phases, schedule, seed=config.seed, log_path=log_path)

    losses = trainer.run(
        checkpoint_every=config.training.checkpoint_every, checkpoint_path=checkpoint_path
    )
    trainer.save(checkpoint_path)
    save_model(model_path, trainer.model, extra={"training_complete": True})
    _write_sidecar(
        _dir_sidecar(out_dir),
        "train",
        config,
        {
            "manifest": str(args.manifest),
            "out_dir": str(out_dir),
            "resume": bool(args.resume),
            "phases": [spec.name for spec in trainer.phases],
        },
    )
    tail = f"; final loss {losses[-1]:.6f}" if losses else ""
    print(f"ran {len(losses)} steps over {len(trainer.phases)} phases{tail}")
    print(f"model at {model_path}")
    return 0


def _generation_parameters(config: RunConfig, seed: int, extra: dict) -> dict:
    sampling = config.sampling
    parameters = {
        "seed": seed,
        "steps": sampling.steps,
        "guidance_scale": sampling.guidance_scale,
        "identity_scale": sampling.identity_scale,
        "active_blocks": sorted(sampling.active_blocks),
        "active_steps": list(sampling.active_steps) if sampling.active_steps else None,
    }
    if sampling.guidance_scale != 1.0:
        parameters["negative_prompt"] = sampling.negative_prompt
    parameters.update(extra)
    return parameters


def cmd_generate(args) -> int:
    config = _load_config(args)
    model, _ = load_model(args.checkpoint)
    schedule = config.schedule.build()
    seed = args.seed if args.seed is not None else config.seed

    region_set = None
    if args.identity:
        if not args.manifest:
            raise ValueError("--identity needs --manifest")
        manifest = load_manifest(args.manifest)
        person = _find_individual(manifest, args.identity)
        member = _member(person, args.image_index)
        region_set = _load_region_set(
            member, manifest.get("label_scheme_id"), model.config.region_size
        )

    image = model.generate(
        schedule,
        args.prompt,
        region_set=region_set,
        gating=config.sampling.gating(),
        seed=seed,
        steps=config.sampling.steps,
        guidance_scale=config.sampling.guidance_scale,
        negative_prompt=config.sampling.negative_prompt,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, image)
    _write_sidecar(
        _file_sidecar(out),
        "generate",
        config,
        _generation_parameters(
            config,
            seed,
            {
                "prompt": args.prompt,
                "checkpoint": str(args.checkpoint),
                "manifest": str(args.manifest) if args.manifest else None,
                "identity": args.identity,
                "image_index": args.image_index if args.identity else None,
                "out": str(out),
            },
        ),
    )
    print(f"wrote {out}")
    return 0


def cmd_multi_generate(args) -> int:
    config = _load_config(args)
    if len(args.identity) != len(args.token_index):
        raise ValueError(
            f"got {len(args.identity)} identities but {len(args.token_index)} token indices"
        )
    model, _ = load_model(args.checkpoint)
    schedule = config.schedule.build()
    manifest = load_manifest(args.manifest)
    seed = args.seed if args.seed is not None else config.seed

    persons = []
    for identity, token_index in zip(args.identity, args.token_index):
        person = _find_individual(manifest, identity)
        member = _member(person, args.image_index)
        region_set = _load_region_set(
            member, manifest.get("label_scheme_id"), model.config.region_size
        )
        persons.append(
            {
                "tokens": model.identity_tokens([region_set]).tokens,
                "prompt_token_index": token_index,
            }
        )

    sampling = config.sampling
    uncond = model.prompt_tokens(sampling.negative_prompt) if sampling.guidance_scale != 1.0 else None
    image = multi_person_sample(
        model.denoiser,
        schedule,
        model.prompt_tokens(args.prompt),
        persons,
        sampling.gating(),
        seed=seed,
        steps=sampling.steps,
        guidance_scale=sampling.guidance_scale,
        uncond_text_tokens=uncond,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, image)
    _write_sidecar(
        _file_sidecar(out),
        "multi-generate",
        config,
        _generation_parameters(
            config,
            seed,
            {
                "prompt": args.prompt,
                "checkpoint": str(args.checkpoint),
                "manifest": str(args.manifest),
                "identities": list(args.identity),
                "token_indices": list(args.token_index),
                "image_index": args.image_index,
                "out": str(out),
            },
        ),
    )
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    client = _client(args, config)
    templates = ScoreTemplates.load(args.templates) if args.templates else ScoreTemplates.default()
    out_dir = Path(args.out_dir)
    scores, summary = evaluate_manifest(
        manifest, client, templates, out_dir, max_in_flight=args.max_in_flight
    )
    _write_sidecar(
        _dir_sidecar(out_dir),
        "evaluate",
        config,
        {
            "manifest": str(args.manifest),
            "out_dir": str(out_dir),
            "templates": str(args.templates) if args.templates else "builtin",
            "max_in_flight": args.max_in_flight,
        },
    )
    print(
        f"scored {summary['n']} samples ({summary['excluded']} excluded): "
        f"identity {summary['d_i_mean']:.3f}, text {summary['d_t_mean']:.3f}, "
        f"harmonic {summary['d_h_mean']:.3f}"
    )
    return 0


# -- ablation ------------------------------------------------------------------


def _parse_axis_values(axis: str, raw: str) -> list:
    parts = [piece.strip() for piece in raw.split(",") if piece.strip()]
    if not parts:
        raise ValueError("--values is empty")
    if axis == "identity_scale":
        return [float(p) for p in parts]
    if axis in ("timesteps", "token_len"):
        return [int(p) for p in parts]
    blocks = []
    for part in parts:
        if part == "all":
            blocks.append(("down", "mid", "up"))
        else:
            blocks.append(tuple(sorted(part.split("|"))))
    return blocks


def _held_out_individuals(manifest: dict) -> list[dict]:
    individuals = manifest.get("individuals", [])
    usable = [
        person
        for person in individuals
        if person.get("verdict") != "dropped" and person.get("part_colors") and person.get("images")
    ]
    if not usable:
        raise ValueError(
            "ablation needs a synthetic manifest with part_colors and images per individual"
        )
    return usable


def ablation_metrics(model: PersonaModel, manifest: dict, config: RunConfig, sampling) -> dict:
    """Generate once per held-out individual and average the two proxies.

    The prompt comes from a different image of the person than the identity
    conditioning, so the text proxy measures prompt following rather than
    source-image copying."""
    schedule = config.schedule.build()
    scheme = manifest.get("label_scheme_id")
    individuals = _held_out_individuals(manifest)
    spec = SyntheticIdentitySpec(image_size=int(manifest.get("image_size", model.config.image_size)))
    identity_errors = []
    caption_scores = []
    for index, person in enumerate(individuals):
        source = _member(person, 0)
        prompt_member = person["images"][1] if len(person["images"]) > 1 else source
        region_set = _load_region_set(source, scheme, model.config.region_size)
        image = model.generate(
            schedule,
            prompt_member.get("caption", ""),
            region_set=region_set,
            gating=sampling.gating(),
            seed=config.seed + index,
            steps=sampling.steps,
            guidance_scale=sampling.guidance_scale,
            negative_prompt=sampling.negative_prompt,
        )
        identity_errors.append(identity_color_error(image, person["part_colors"]))
        params = prompt_member.get("caption_params")
        if params:
            caption_scores.append(caption_match(image, params, spec))
    return {
        "identity_error": float(np.mean(identity_errors)),
        "caption_score": float(np.mean(caption_scores)) if caption_scores else None,
        "n_individuals": len(individuals),
    }


def _ablation_sampling(axis: str, value, sampling):
    if axis == "identity_scale":
        return replace(sampling, identity_scale=value)
    if axis == "blocks":
        return replace(sampling, active_blocks=value)
    if axis == "timesteps":
        return replace(sampling, steps=value)
    return sampling


def ablate_rows(axis: str, values: list, checkpoints: list, manifest: dict, config: RunConfig) -> list[dict]:
    if axis == "token_len":
        if len(checkpoints) != len(values):
            raise ValueError(
                f"token_len axis needs one checkpoint per value; got {len(checkpoints)} "
                f"checkpoints for {len(values)} values"
            )
    elif len(checkpoints) != 1:
        raise ValueError(f"{axis} axis needs exactly one checkpoint, got {len(checkpoints)}")

    rows = []
    shared_model = None if axis == "token_len" else load_model(checkpoints[0])[0]
    for index, value in enumerate(values):
        if axis == "token_len":
            model, _ = load_model(checkpoints[index])
            if model.config.token_len != value:
                raise ValueError(
                    f"checkpoint {checkpoints[index]} has token_len {model.config.token_len}, "
                    f"expected {value}"
                )
        else:
            model = shared_model
        sampling = _ablation_sampling(axis, value, config.sampling)
        metrics = ablation_metrics(model, manifest, config, sampling)
        label = "|".join(value) if isinstance(value, tuple) else value
        rows.append({"axis": axis, "value": label, **metrics})
    return rows


def _rows_to_csv(rows: list[dict]) -> str:
    header = ["axis", "value", "identity_error", "caption_score", "n_individuals"]
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            cell = row[key]
            if isinstance(cell, float):
                cells.append(repr(cell))
            elif cell is None:
                cells.append("")
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    config = _load_config(args)
    values = _parse_axis_values(args.axis, args.values)
    manifest = load_manifest(args.manifest)
    rows = ablate_rows(args.axis, values, args.checkpoint, manifest, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_rows_to_csv(rows), encoding="utf-8")
    _write_sidecar(
        _file_sidecar(out),
        "ablate",
        config,
        {
            "axis": args.axis,
            "values": args.values,
            "checkpoints": [str(c) for c in args.checkpoint],
            "manifest": str(args.manifest),
            "out": str(out),
        },
    )
    for row in rows:
        caption = f"{row['caption_score']:.3f}" if row["caption_score"] is not None else "-"
        print(
            f"{args.axis}={row['value']}: identity_error={row['identity_error']:.4f} "
            f"caption_score={caption}"
        )
    return 0


# -- stats ----------------------------------------------------------------------


def manifest_stats(manifest: dict) -> dict:
    individuals = manifest.get("individuals", [])
    images = [len(p.get("images", [])) for p in individuals]
    verdicts = [p.get("verdict") for p in individuals if p.get("verdict")]
    stats = {
        "individuals": len(individuals),
        "images": int(sum(images)),
        "images_per_individual": {
            str(count): images.count(count) for count in sorted(set(images))
        },
        "label_scheme_id": manifest.get("label_scheme_id"),
    }
    if verdicts:
        stats["kept"] = verdicts.count("kept")
        stats["dropped"] = verdicts.count("dropped")
    return stats


def loss_log_stats(path) -> dict:
    phases: dict[str, list[float]] = {}
    order = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            name = entry["phase"]
            if name not in phases:
                phases[name] = []
                order.append(name)
            phases[name].append(float(entry["loss"]))
    if not order:
        raise ValueError(f"{path}: empty loss log")
    out = {}
    for name in order:
        losses = phases[name]
        out[name] = {
            "steps": len(losses),
            "first_loss": losses[0],
            "last_loss": losses[-1],
            "mean_last_10": float(np.mean(losses[-10:])),
        }
    return out


def cmd_stats(args) -> int:
    config = _load_config(args)
    if not args.manifest and not args.loss_log:
        raise ValueError("stats needs --manifest and/or --loss-log")
    report = {}
    if args.manifest:
        report["manifest"] = manifest_stats(load_manifest(args.manifest))
    if args.loss_log:
        report["loss_log"] = loss_log_stats(args.loss_log)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        save_json(out, report)
        _write_sidecar(
            _file_sidecar(out),
            "stats",
            config,
            {
                "manifest": str(args.manifest) if args.manifest else None,
                "loss_log": str(args.loss_log) if args.loss_log else None,
                "out": str(out),
            },
        )
    return 0


# -- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are user errors (exit 1), not internal ones."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flag(parser):
    parser.add_argument("--config", help="run config JSON (defaults apply when omitted)")


def _add_transport_flags(parser):
    parser.add_argument("--mock-transport", help="scripted transport JSON file")
    parser.add_argument("--endpoint", help="live model endpoint URL")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bodyforge", description=__doc__.split("\n\n")[0])
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="print the fully resolved run config as JSON and exit",
    )
    _add_config_flag(parser)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-synthetic", help="render a synthetic identity pool")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-identities", type=int, default=8)
    p.add_argument("--images-per-identity", type=int, default=2)
    p.add_argument("--image-size", type=int, default=None, help="default: the model image size")
    p.add_argument("--jitter", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="default: the config seed")
    _add_config_flag(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("curate", help="filter and caption a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="curated manifest path")
    p.add_argument("--report", default=None, help="default: <out stem>.report.json")
    _add_transport_flags(p)
    _add_config_flag(p)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="run the training phases on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the run checkpoint")
    _add_config_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample one image from a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--manifest", default=None, help="dataset manifest holding the identity")
    p.add_argument("--identity", default=None, help="individual id to condition on")
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    _add_config_flag(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("multi-generate", help="compose several identities in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--identity", action="append", required=True, help="repeat per person")
    p.add_argument(
        "--token-index", action="append", type=int, required=True,
        help="prompt token naming each person; repeat per person",
    )
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    _add_config_flag(p)
    p.set_defaults(func=cmd_multi_generate)

    p = sub.add_parser("evaluate", help="grade generated samples against inputs and prompts")
    p.add_argument("--manifest", required=True, help="samples manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--templates", default=None, help="grading template directory")
    p.add_argument("--max-in-flight", type=int, default=4)
    _add_transport_flags(p)
    _add_config_flag(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep one axis and report the proxy metrics")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument(
        "--checkpoint", action="append", required=True,
        help="model checkpoint; repeat per value for the token_len axis",
    )
    p.add_argument("--manifest", required=True, help="held-out synthetic manifest")
    p.add_argument("--out", required=True, help="output CSV path")
    _add_config_flag(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="summarize a manifest or a loss log")
    p.add_argument("--manifest", default=None)
    p.add_argument("--loss-log", default=None)
    p.add_argument("--out", default=None, help="also write the summary JSON here")
    _add_config_flag(p)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if exc.code is not None else 0
        return int(code)

    if args.print_config:
        config = _load_config(args)
        sys.stdout.write(run_config_json(config))
        return 0
    if args.command is None:
        print("bodyforge: error: a command is required (see --help)", file=sys.stderr)
        return 1

    try:
        return int(args.func(args) or 0)
    except _USER_ERRORS as err:
        message = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"bodyforge: error: {message}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
