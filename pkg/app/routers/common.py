"""Helpers shared by the command handlers: config and artifact loading,
precision resolution, list-valued flags and report output."""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.config import get_settings
from app.errors import CheckpointIncompatible, ConfigError, IoFailure, ShapeMismatch
from app.schemas import RunConfig, SweepResult
from app.services.model import ModelParams
from app.storage import Checkpoint, load_checkpoint

logger = logging.getLogger(__name__)

SWEEP_CSV_COLUMNS = ["variable", "metric", "value", "config_hash"]


# ---- Flag parsing ----

def _list_of(cast: Callable, label: str) -> Callable[[str], list]:
    def parse(text: str) -> list:
        try:
            values = [cast(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list of {label}, got '{text}'")
        if not values:
            raise argparse.ArgumentTypeError(f"expected at least one {label[:-1]}")
        return values

    return parse


int_list = _list_of(int, "integers")
float_list = _list_of(float, "numbers")


def add_precision_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--precision", choices=["f32", "f64"], help="Tensor precision for this command")


# ---- Configuration ----

def _field_path(loc: Sequence) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def load_run_config(path: Optional[str]) -> RunConfig:
    """RunConfig from a JSON file, or all defaults when ``path`` is None."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(path, e.strerror or str(e)) from e
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        problems = "; ".join(f"{_field_path(err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{path}: invalid config: {problems}") from e


def resolve_precision(flag: Optional[str], fallback: str) -> str:
    """--precision wins, then an explicit EGR_PRECISION, then ``fallback``."""
    if flag:
        return flag
    settings = get_settings()
    if "precision" in settings.model_fields_set:
        return settings.precision
    return fallback


# ---- Artifacts ----

def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    """Model parameters in the current precision; call inside ``ag.precision``."""
    try:
        return ModelParams.from_arrays(ckpt.config.model, ckpt.params)
    except ShapeMismatch as e:
        raise CheckpointIncompatible(f"checkpoint parameters do not match its model config: {e}") from e


def check_crop(ckpt: Checkpoint, manifest: dict) -> None:
    crop = manifest.get("crop")
    if crop != ckpt.config.model.crop:
        raise CheckpointIncompatible(
            f"checkpoint expects {ckpt.config.model.crop}px crops, dataset has {crop}px"
        )


def load_model(path: str, precision_flag: Optional[str]) -> Tuple[Checkpoint, str]:
    """Checkpoint plus the precision its tensors should be built in."""
    ckpt = load_checkpoint(path)
    tag = resolve_precision(precision_flag, ckpt.precision)
    logger.debug(f"Loaded checkpoint {path} (step {ckpt.step}, stored {ckpt.precision}, running {tag})")
    return ckpt, tag


# ---- Output ----

def emit_json(document, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(json.dumps(document, indent=2, sort_keys=True) + "\n")


def sweep_rows(sweep: SweepResult, config_hash: str, prefix: str = "") -> List[List]:
    rows = []
    for i, value in enumerate(sweep.values):
        for metric, series in sweep.metrics.items():
            rows.append([f"{value:g}", f"{prefix}{metric}", repr(float(series[i])), config_hash])
    return rows


def write_csv(columns: Sequence[str], rows: Sequence[Sequence], path: Optional[str] = None) -> None:
    """Write a CSV with a fixed header to ``path`` or stdout."""
    try:
        if path is None:
            writer = csv.writer(sys.stdout, lineterminator="\n")
            writer.writerow(columns)
            writer.writerows(rows)
            return
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            writer.writerows(rows)
    except OSError as e:
        raise IoFailure(path, e.strerror or str(e)) from e


def as_document(model) -> dict:
    """JSON-safe dict of a pydantic model (non-finite floats become null)."""
    return json.loads(model.model_dump_json())
