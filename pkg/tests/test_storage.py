import json
import time

import numpy as np
import pytest

from aem import storage
from aem.config import RunConfig
from aem.generation import make_conjoint_dataset
from aem.pipeline import build_world, conjoint_config


@pytest.fixture(scope="module")
def world():
    return build_world(RunConfig(seed=3).updated(**{"regional.n_regions": 12, "regional.personas_per_region": 4,
                                                     "regional.n_z": 5}))


def tables_equal(a, b):
    return (all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("region", "order", "persona", "period", "choice",
                                                                        "treatment"))
            and (a.region_ids, a.order_ids, a.persona_ids) == (b.region_ids, b.order_ids, b.persona_ids))


def test_triplet_round_trip(tmp_path, world):
    p = storage.write_triplets(tmp_path / "t.csv", world.agent)
    assert tables_equal(storage.read_triplets(p), world.agent)
    assert storage.validate_file(p) == []


def test_one_hot_choice_columns_accepted(tmp_path, world):
    p = storage.write_triplets(tmp_path / "t.csv", world.agent)
    lines = p.read_text().splitlines()
    k = world.agent.n_categories
    out = [lines[0], ",".join(lines[1].split(",")[:-1] + [f"choice_{j}" for j in range(k)])]
    for ln in lines[2:]:
        f = ln.split(",")
        out.append(",".join(f[:-1] + ["1" if j == int(f[-1]) else "0" for j in range(k)]))
    p.write_text("\n".join(out) + "\n")
    assert tables_equal(storage.read_triplets(p), world.agent)
    bad = out[:3] + [",".join(out[3].split(",")[:-k] + ["1"] * k)] + out[4:]
    p.write_text("\n".join(bad) + "\n")
    problems = storage.validate_file(p)
    assert problems and problems[0].startswith("line 4:")


def test_large_triplet_file_is_fast(tmp_path):
    w = build_world(RunConfig().updated(**{"regional.n_regions": 90, "regional.personas_per_region": 10,
                                           "regional.n_z": 21}))
    assert len(w.agent) == 37800
    t0 = time.perf_counter()
    p = storage.write_triplets(tmp_path / "big.csv", w.agent)
    back = storage.read_triplets(p)
    assert time.perf_counter() - t0 < 5.0
    assert tables_equal(back, w.agent)


def test_share_round_trip_lossless(tmp_path, world):
    table = storage.shares_array_to_dict(world.human_shares, world.tasks.region_ids)
    p = storage.write_shares(tmp_path / "s.csv", table, world.arms)
    back, arms = storage.read_shares(p)
    assert arms == world.arms
    assert set(back) == set(table) and all(np.array_equal(back[k], table[k]) for k in table)


def test_shares_not_summing_to_one_name_region(tmp_path, world):
    region = world.tasks.region_ids[0]
    table = {(region, "pre"): np.array([0.5, 0.3, 0.1, 0.05, 0.03]), (region, "post"): np.array([0.2] * 5)}
    p = storage.write_shares(tmp_path / "s.csv", table, world.arms)
    with pytest.raises(storage.DatasetError) as info:
        storage.read_shares(p)
    msg = str(info.value)
    assert region in msg and "0.98" in msg


def test_version_and_truncation_errors(tmp_path, world):
    p = storage.write_triplets(tmp_path / "t.csv", world.agent)
    lines = p.read_text().splitlines()
    meta = json.loads(lines[0][2:])
    meta["version"] = 99
    (tmp_path / "v.csv").write_text("# " + json.dumps(meta) + "\n" + "\n".join(lines[1:]) + "\n")
    with pytest.raises(storage.DatasetError, match="version 99"):
        storage.read_triplets(tmp_path / "v.csv")
    (tmp_path / "cut.csv").write_text("\n".join(lines[:-7]) + "\n")
    with pytest.raises(storage.DatasetError, match="truncated"):
        storage.read_triplets(tmp_path / "cut.csv")
    (tmp_path / "raw.csv").write_text("region,order\nZ,O\n")
    assert storage.validate_file(tmp_path / "raw.csv") == ["line 1: missing metadata line"]


def test_conjoint_round_trip(tmp_path):
    data = make_conjoint_dataset(conjoint_config(RunConfig(seed=2).updated(**{"conjoint.n_primary": 30,
                                                                              "conjoint.n_aux": 40})))
    p = storage.write_conjoint(tmp_path / "c.csv", data)
    back = storage.read_conjoint(p)
    for f in ("X_primary", "y_primary", "z_primary", "customer_primary", "X_aux", "z_aux", "customer_aux",
              "y_aux_hidden", "beta_population"):
        assert np.array_equal(getattr(back, f), getattr(data, f)), f
