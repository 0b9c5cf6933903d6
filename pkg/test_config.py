#!/usr/bin/env python3
"""
Tests for run configuration resolution and the report writers.
"""

import io
import os
import sys
import tempfile
from contextlib import contextmanager

import openpyxl
import pandas as pd

from config import ConfigError, RunConfig, load_run_config, save_run_config
from reporting import format_table, print_table, save_report
from test_diffcore import run_all


@contextmanager
def _seed_env(value):
    previous = os.environ.pop("COAM_SEED", None)
    if value is not None:
        os.environ["COAM_SEED"] = value
    try:
        yield
    finally:
        os.environ.pop("COAM_SEED", None)
        if previous is not None:
            os.environ["COAM_SEED"] = previous


def _write(tmp, name, text):
    path = os.path.join(tmp, name)
    with open(path, "w") as f:
        f.write(text)
    return path


def test_defaults_without_file():
    """No file and no environment gives the dataclass defaults."""
    with _seed_env(None):
        cfg = load_run_config()
    assert cfg.seed == 0 and cfg.grid_size == 128 and cfg.top_k == 2000
    assert not cfg.refine and cfg.use_distinctiveness
    assert cfg.train.learning_rate == 1e-4 and cfg.network.image_size == 64
    assert cfg.paths.log_path == os.path.join("output", "coam.log")
    print("✓ defaults without a config file")


def test_precedence():
    """defaults < COAM_SEED < YAML < overrides, merged key by key."""
    with tempfile.TemporaryDirectory() as tmp:
        path = _write(tmp, "run.yaml", "seed: 5\ntrain:\n  learning_rate: 1.0e-3\n  batch_size: 2\n")
        with _seed_env("3"):
            assert load_run_config().seed == 3
            cfg = load_run_config(path)
            assert cfg.seed == 5
            assert cfg.train.learning_rate == 1e-3 and cfg.train.batch_size == 2
            assert cfg.train.margin == 1.0

            cfg = load_run_config(path, {"seed": 9, "train.batch_size": 4, "network": {"descriptor_dim": 16}})
            assert cfg.seed == 9 and cfg.train.batch_size == 4 and cfg.train.learning_rate == 1e-3
            assert cfg.network.descriptor_dim == 16
    print("✓ configuration precedence")


def test_seed_propagates_to_sections():
    """The global seed feeds section seeds unless a section sets its own."""
    with tempfile.TemporaryDirectory() as tmp, _seed_env(None):
        cfg = load_run_config(overrides={"seed": 7})
        assert cfg.network.seed == 7 and cfg.train.seed == 7 and cfg.ransac.rng_seed == 7
        path = _write(tmp, "run.yaml", "seed: 7\nransac:\n  rng_seed: 1\n")
        assert load_run_config(path).ransac.rng_seed == 1
    print("✓ global seed propagation")


def test_type_coercion():
    """Exponent floats written without a dot, comma lists and string booleans are read."""
    with _seed_env(None):
        cfg = load_run_config(overrides={"train.learning_rate": "1e-4", "network.encoder_widths": "8,8,16,16",
                                         "refine": "true"})
    assert cfg.train.learning_rate == 1e-4
    assert cfg.network.encoder_widths == (8, 8, 16, 16)
    assert cfg.refine is True
    print("✓ type coercion")


def test_errors_name_file_key_and_section():
    """Unknown keys, bad values and malformed files raise ConfigError with context."""
    with tempfile.TemporaryDirectory() as tmp, _seed_env(None):
        cases = {
            "unknown.yaml": ("train:\n  learning_rat: 0.1\n", ["unknown.yaml", "learning_rat", "train"]),
            "toplevel.yaml": ("grid: 64\n", ["toplevel.yaml", "grid", "top level"]),
            "invalid.yaml": ("network:\n  image_size: 50\n", ["invalid.yaml", "network"]),
            "list.yaml": ("- 1\n- 2\n", ["list.yaml", "mapping"]),
            "broken.yaml": ("train: [1, 2\n", ["broken.yaml"]),
            "section.yaml": ("paths: here\n", ["section.yaml", "paths"]),
        }
        for name, (text, fragments) in cases.items():
            path = _write(tmp, name, text)
            try:
                load_run_config(path)
                raise AssertionError(f"{name} accepted")
            except ConfigError as e:
                for fragment in fragments:
                    assert fragment in str(e), f"{fragment!r} not in {e}"
        try:
            load_run_config(os.path.join(tmp, "absent.yaml"))
            raise AssertionError("missing file accepted")
        except ConfigError:
            pass
    with _seed_env("seven"):
        try:
            load_run_config()
            raise AssertionError("non-numeric COAM_SEED accepted")
        except ConfigError as e:
            assert "COAM_SEED" in str(e)
    print("✓ configuration errors")


def test_save_round_trip():
    """save_run_config output reloads to an equal RunConfig."""
    with tempfile.TemporaryDirectory() as tmp, _seed_env(None):
        original = load_run_config(overrides={"seed": 4, "refine": True, "network.descriptor_dim": 16,
                                              "train.betas": [0.8, 0.99], "paths.output_dir": "runs/a"})
        path = save_run_config(original, os.path.join(tmp, "nested", "run.yaml"))
        assert load_run_config(path) == original
        assert isinstance(RunConfig(), RunConfig)
    print("✓ save/load round trip")


def test_console_table():
    """Banner, header, rule and one padded row per record."""
    df = pd.DataFrame({"threshold": [1.0, 2.0], "correct": [3, 4], "fraction": [0.25, 0.5]})
    text = format_table("Curve", df)
    lines = text.splitlines()
    assert lines[0] == "=" * 100 and lines[1] == "Curve" and lines[2] == "=" * 100
    assert lines[3].split() == ["threshold", "correct", "fraction"]
    assert lines[4] == "-" * 100
    assert lines[5].split() == ["1.0000", "3", "0.2500"]
    assert len(lines) == 7

    stream = io.StringIO()
    print_table("Curve", df, stream)
    assert stream.getvalue() == text + "\n"
    print("✓ console table")


def test_excel_report():
    """Bold headers, borders, capped widths and green/red pass-fail fills."""
    pairs = pd.DataFrame({"pair_id": ["pair_0000", "pair_0001"], "rotation_error": [0.5, 42.0],
                          "joint_correct": [True, False], "note": ["x" * 60, ""]})
    with tempfile.TemporaryDirectory() as tmp:
        path = save_report({"pairs": pairs, "summary": pd.DataFrame({"rotation": [0.5]})},
                           os.path.join(tmp, "out", "report.xlsx"))
        book = openpyxl.load_workbook(path)
        assert book.sheetnames == ["pairs", "summary"]
        sheet = book["pairs"]
        assert sheet["A1"].font.bold
        assert sheet["B2"].border.left.style == "thin"
        assert sheet["C2"].fill.start_color.rgb == "FFC6EFCE"
        assert sheet["C3"].fill.start_color.rgb == "FFFFC7CE"
        assert sheet.column_dimensions["D"].width == 30
        assert sheet.column_dimensions["A"].width == len("pair_0000") + 2
    print("✓ Excel report")


if __name__ == "__main__":
    print("Testing config and reporting...")
    failed = run_all(dict(globals()))
    if failed:
        print(f"\n✗ {failed} test(s) failed.")
        sys.exit(1)
    print("\n✓ All config and reporting tests passed!")
