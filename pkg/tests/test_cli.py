import json
from pathlib import Path

import pytest
import tomli

from speclab.cli import ConfigError, build_domain, main, validate_config

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))


def load(path):
    with open(path, "rb") as fh:
        return tomli.load(fh)


def dump(cfg, path):
    """Minimal TOML writer for the flat configs used here."""
    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k} = {val(v)}" for k, v in cfg.items() if not isinstance(v, (dict, list))
             or (isinstance(v, list) and not (v and isinstance(v[0], dict)))]
    for k, v in cfg.items():
        if isinstance(v, dict):
            lines.append(f"[{k}]")
            lines += [f"{kk} = {val(vv)}" for kk, vv in v.items()]
        elif isinstance(v, list) and v and isinstance(v[0], dict):
            for item in v:
                lines.append(f"[[{k}]]")
                lines += [f"{kk} = {val(vv)}" for kk, vv in item.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture
def clr_cfg():
    return load(next(p for p in CONFIGS if p.name == "clr_bump.toml"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_hold(path, tmp_path):
    cfg = load(path)
    assert main([cfg["pipeline"], "--config", str(path), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["holds"] and report["failed"] is None
    assert report["experiment"] == cfg["experiment"]
    assert json.loads((tmp_path / "run.json").read_text())["config"] == str(path)


def test_failing_certificate_exits_two(clr_cfg, tmp_path, capsys):
    clr_cfg["params"] = {"C": 1e-3}
    cfg = dump(clr_cfg, tmp_path / "c.toml")
    assert main(["clr", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["failed"] == "clr" and not report["holds"]
    assert "certificate failed" in capsys.readouterr().err


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(colour="red"),
    lambda c: c.update(params={"bandwidth": 0.1}),
    lambda c: c["domain"].update(kind="sphere"),
    lambda c: c["domain"].update(n=2),
    lambda c: c["potential"][0].update(kind="nonsense"),
    lambda c: c["potential"][0].update(width=-1.0),
    lambda c: c.update(pipeline="gny"),
    lambda c: c.pop("domain"),
], ids=["unknown-key", "foreign-param", "bad-kind", "tiny-grid", "bad-potential",
        "bad-width", "pipeline-mismatch", "no-domain"])
def test_invalid_config_exits_one(clr_cfg, tmp_path, capsys, mutate):
    mutate(clr_cfg)
    cfg = dump(clr_cfg, tmp_path / "c.toml")
    assert main(["clr", "--config", cfg]) == 1
    assert capsys.readouterr().err.startswith("speclab: ")


def test_unreadable_and_bad_seed(clr_cfg, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("experiment = [\n")
    assert main(["clr", "--config", str(bad)]) == 1
    assert main(["clr", "--config", str(tmp_path / "missing.toml")]) == 1
    cfg = dump(clr_cfg, tmp_path / "c.toml")
    assert main(["clr", "--config", cfg, "--seed", "-1"]) == 1
    assert main(["clr", "--config", cfg, "--refine", "-1"]) == 1


def test_wrong_domain_kind(clr_cfg, tmp_path):
    clr_cfg["domain"] = {"kind": "interval", "bounds": [-5.0, 5.0], "n": 101}
    cfg = dump(clr_cfg, tmp_path / "c.toml")
    for pipe in ("decompose", "gauge", "gny"):
        assert main([pipe, "--config", cfg]) == 1


def test_report_is_deterministic(tmp_path):
    path = next(p for p in CONFIGS if p.name == "splitting.toml")
    texts = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert main(["splitting", "--config", str(path), "--out", str(out), "--seed", "17"]) == 0
        texts.append((out / "report.json").read_bytes())
    assert texts[0] == texts[1]
    assert json.loads(texts[0])["seed"] == 17


def test_seed_changes_random_report(tmp_path):
    path = next(p for p in CONFIGS if p.name == "splitting.toml")
    reports = []
    for seed in (1, 2):
        out = tmp_path / str(seed)
        main(["splitting", "--config", str(path), "--out", str(out), "--seed", str(seed)])
        reports.append(json.loads((out / "report.json").read_text())["result"])
    assert reports[0] != reports[1]


def test_decompose_replay(tmp_path):
    path = next(p for p in CONFIGS if p.name == "decompose_two_wells.toml")
    assert main(["decompose", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    first = json.loads((tmp_path / "a" / "report.json").read_text())
    cfg = load(path)
    cfg["params"] = {"replay": str(tmp_path / "a" / "covering.json")}
    replay = dump(cfg, tmp_path / "replay.toml")
    assert main(["decompose", "--config", replay, "--out", str(tmp_path / "b")]) == 0
    second = json.loads((tmp_path / "b" / "report.json").read_text())
    assert second["result"]["covering"] == first["result"]["covering"]
    assert second["result"]["checks"] == first["result"]["checks"]


def test_replay_on_other_grid_rejected(tmp_path):
    path = next(p for p in CONFIGS if p.name == "decompose_two_wells.toml")
    main(["decompose", "--config", str(path), "--out", str(tmp_path / "a")])
    cfg = load(path)
    cfg["domain"]["n"] = 3001
    cfg["params"] = {"replay": str(tmp_path / "a" / "covering.json")}
    assert main(["decompose", "--config", dump(cfg, tmp_path / "r.toml")]) == 1
    cfg["params"] = {"replay": str(tmp_path / "nothing.json")}
    assert main(["decompose", "--config", dump(cfg, tmp_path / "r.toml")]) == 1


def test_refinement_sweep(clr_cfg, tmp_path):
    clr_cfg["domain"]["n"] = 501
    cfg = dump(clr_cfg, tmp_path / "c.toml")
    assert main(["clr", "--config", cfg, "--out", str(tmp_path / "o"), "--refine", "2"]) == 0
    ref = json.loads((tmp_path / "o" / "report.json").read_text())["refinement"]
    assert len(ref["h"]) == 3
    assert ref["h"][0] == pytest.approx(2 * ref["h"][1]) == pytest.approx(4 * ref["h"][2])
    assert len(ref["values"]["ratio"]) == 3 and len(ref["slopes"]["ratio"]) == 1
    rows = (tmp_path / "o" / "refinement.csv").read_text().splitlines()
    assert rows[0] == "h,ratio" and len(rows) == 4


def test_output_from_config_key(clr_cfg, tmp_path):
    clr_cfg["output"] = str(tmp_path / "from_cfg")
    cfg = dump(clr_cfg, tmp_path / "c.toml")
    assert main(["clr", "--config", cfg]) == 0
    assert (tmp_path / "from_cfg" / "report.json").is_file()


def test_build_domain_refinement():
    d = {"kind": "rectangle", "bounds": [0.0, 1.0, 0.0, 2.0], "n": [11, 21]}
    assert build_domain(d, 1).n == (21, 41)
    with pytest.raises(ConfigError):
        validate_config({"experiment": "x", "pipeline": "dr", "params": {"q": 1}})


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    path = next(p for p in CONFIGS if p.name == "gny_zero.toml")
    proc = subprocess.run([sys.executable, "-m", "speclab", "gny", "--config", str(path),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "gny holds" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "speclab", "nope", "--config", str(path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "invalid choice" in proc.stderr
