import json
import math
import urllib.error
import urllib.request

import numpy as np
import pytest

from trialign import encoder as enc
from trialign.errors import DegenerateInputError, DimensionMismatch, FormatError, ValidationError
from trialign.retrieval import (
    DEFAULT_CONDITIONING_NORM,
    build_index,
    load_index,
    query,
    query_joint,
    renorm_for_conditioning,
    save_index,
)
from trialign.service import make_server, start_background


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_index(rng, n, d, with_ties=False):
    embeddings = {f"id{i:05d}": rng.normal(size=d) for i in range(n)}
    if with_ties:
        # duplicated rows produce exact score ties, broken by insertion order
        base = embeddings["id00000"]
        embeddings["id_dup_a"] = base.copy()
        embeddings["id_dup_b"] = base.copy()
    return build_index(embeddings)


def oracle_query(index, q, k):
    qn = unit(q)
    scored = []
    for pos, sid in enumerate(index.ids):
        scored.append((float(np.dot(index.matrix[pos], qn)), pos, sid))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(sid, s) for s, _, sid in scored[: min(k, len(index))]]


def oracle_joint(index, a, b, k):
    an, bn = unit(a), unit(b)
    scored = []
    for pos, sid in enumerate(index.ids):
        s = min(float(np.dot(index.matrix[pos], an)), float(np.dot(index.matrix[pos], bn)))
        scored.append((s, pos, sid))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(sid, s) for s, _, sid in scored[: min(k, len(index))]]


class TestBuildIndex:
    def test_single_embedding(self):
        index = build_index({"only": np.array([1.0, 2.0])})
        assert len(index) == 1

    def test_rows_normalized_on_ingest(self):
        index = build_index({"a": np.array([3.0, 4.0])})
        np.testing.assert_allclose(index.matrix[0], [0.6, 0.8], atol=1e-15)

    def test_duplicate_id_names_offender(self):
        with pytest.raises(ValidationError, match="dup"):
            build_index([("dup", np.ones(2)), ("dup", np.ones(2))])

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            build_index({"z": np.zeros(3)})

    def test_inconsistent_dims(self):
        with pytest.raises(DimensionMismatch):
            build_index({"a": np.ones(2), "b": np.ones(3)})


class TestQuery:
    def test_stored_row_scores_one(self):
        rng = np.random.default_rng(0)
        index = random_index(rng, 20, 6)
        q = index.matrix[7].copy()
        top_id, top_score = query(index, q, 1)[0]
        assert top_id == index.ids[7]
        assert top_score == pytest.approx(1.0)

    def test_k_clamps_to_index_size(self):
        rng = np.random.default_rng(1)
        index = random_index(rng, 5, 4)
        assert len(query(index, rng.normal(size=4), 50)) == 5

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(2)
        index = random_index(rng, 300, 8, with_ties=True)
        for trial in range(5):
            q = rng.normal(size=8)
            got = query(index, q, 10)
            want = oracle_query(index, q, 10)
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose(
                [g[1] for g in got], [w[1] for w in want], atol=1e-12
            )

    def test_dim_mismatch(self):
        index = random_index(np.random.default_rng(3), 4, 5)
        with pytest.raises(DimensionMismatch):
            query(index, np.ones(3), 1)

    def test_rejects_nonfinite_query(self):
        index = random_index(np.random.default_rng(4), 4, 3)
        with pytest.raises(ValidationError):
            query(index, np.array([1.0, np.nan, 0.0]), 1)


class TestQueryJoint:
    def test_bisector_candidate_first(self):
        r = math.sqrt(2) / 2
        index = build_index(
            {"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0]), "mid": np.array([r, r])}
        )
        got = query_joint(index, np.array([1.0, 0.0]), np.array([0.0, 1.0]), 3)
        assert got[0][0] == "mid"
        assert got[0][1] == pytest.approx(r)

    def test_equal_inputs_reduce_to_single_query(self):
        rng = np.random.default_rng(5)
        index = random_index(rng, 40, 6)
        a = rng.normal(size=6)
        assert query_joint(index, a, a.copy(), 10) == query(index, a, 10)

    def test_matches_min_max_oracle(self):
        rng = np.random.default_rng(6)
        index = random_index(rng, 300, 8)
        for trial in range(5):
            a, b = rng.normal(size=8), rng.normal(size=8)
            got = query_joint(index, a, b, 12)
            want = oracle_joint(index, a, b, 12)
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose(
                [g[1] for g in got], [w[1] for w in want], atol=1e-12
            )

    def test_joint_top_score_bounded_by_single(self):
        rng = np.random.default_rng(7)
        index = random_index(rng, 60, 5)
        for _ in range(10):
            a, b = rng.normal(size=5), rng.normal(size=5)
            joint = query_joint(index, a, b, 1)[0][1]
            assert joint <= query(index, a, 1)[0][1] + 1e-12
            assert joint <= query(index, b, 1)[0][1] + 1e-12


class TestRenorm:
    def test_default_target_is_half_sqrt_768(self):
        assert DEFAULT_CONDITIONING_NORM == pytest.approx(0.5 * math.sqrt(768.0))
        v = unit(np.arange(1.0, 9.0))
        out = renorm_for_conditioning(v)
        assert np.linalg.norm(out) == pytest.approx(13.8564, abs=1e-3)
        assert abs(np.linalg.norm(out) - 0.5 * math.sqrt(768.0)) <= 1e-9

    def test_identity_when_target_equals_norm(self):
        v = np.array([3.0, 4.0])
        np.testing.assert_allclose(renorm_for_conditioning(v, 5.0), v, atol=1e-12)

    def test_zero_vector_error(self):
        with pytest.raises(DegenerateInputError):
            renorm_for_conditioning(np.zeros(4))

    def test_direction_preserved(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=6)
        out = renorm_for_conditioning(v, 2.5)
        np.testing.assert_allclose(unit(out), unit(v), atol=1e-12)


class TestPersistence:
    def test_round_trip_byte_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        index = build_index(
            {f"s{i}": rng.normal(size=7) for i in range(25)},
            metadata={"s0": {"dataset_tag": "synthetic"}},
        )
        p1 = str(tmp_path / "a.idx")
        p2 = str(tmp_path / "b.idx")
        save_index(index, p1)
        loaded = load_index(p1)
        assert loaded.ids == index.ids
        assert loaded.matrix.tobytes() == index.matrix.tobytes()
        assert loaded.metadata == index.metadata
        save_index(loaded, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_truncated_index(self, tmp_path):
        rng = np.random.default_rng(10)
        index = build_index({f"s{i}": rng.normal(size=4) for i in range(5)})
        path = str(tmp_path / "x.idx")
        save_index(index, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-5])
        with pytest.raises(FormatError):
            load_index(path)


def post_json(url, payload):
    req = urllib.request.Request(
        url,
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=5) as resp:
        return resp.status, json.loads(resp.read().decode("utf-8"))


class TestService:
    @pytest.fixture()
    def server(self):
        rng = np.random.default_rng(11)
        embeddings = {f"s{i}": rng.normal(size=6) for i in range(30)}
        index = build_index(embeddings)
        config = enc.EncoderConfig(
            point_feature_dims=(4,), head_dims=(6,), embed_dim=6, text_dim=5, image_dim=4
        )
        state = enc.init_model(config, np.random.default_rng(0))
        server = make_server(index, state)
        start_background(server)
        host, port = server.server_address[:2]
        yield index, state, f"http://{host}:{port}"
        server.shutdown()

    def test_healthz(self, server):
        index, _, base = server
        with urllib.request.urlopen(base + "/healthz", timeout=5) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        assert payload == {"status": "ok", "size": len(index)}

    def test_query_by_vector(self, server):
        index, _, base = server
        q = index.matrix[3].tolist()
        status, payload = post_json(base + "/query", {"vector": q, "k": 4})
        assert status == 200
        assert payload["results"][0]["id"] == index.ids[3]
        assert payload["results"][0]["score"] == pytest.approx(1.0)
        assert len(payload["results"]) == 4

    def test_query_by_shape_id(self, server):
        index, _, base = server
        status, payload = post_json(base + "/query", {"shape_id": "s5", "k": 1})
        assert status == 200
        assert payload["results"][0]["id"] == "s5"

    def test_query_by_raw_modality(self, server):
        index, state, base = server
        raw = list(range(1, 6))  # text_dim = 5
        status, payload = post_json(
            base + "/query", {"modality": "text", "raw_vector": raw, "k": 2}
        )
        assert status == 200
        expect = query(index, enc.project_text(np.array(raw, dtype=float), state), 2)
        assert [r["id"] for r in payload["results"]] == [sid for sid, _ in expect]

    def test_query_joint_endpoint(self, server):
        index, _, base = server
        a = index.matrix[0].tolist()
        b = index.matrix[1].tolist()
        status, payload = post_json(base + "/query_joint", {"a": a, "b": b, "k": 3})
        assert status == 200
        expect = query_joint(index, np.array(a), np.array(b), 3)
        assert [r["id"] for r in payload["results"]] == [sid for sid, _ in expect]

    def test_error_payload_shape(self, server):
        _, _, base = server
        with pytest.raises(urllib.error.HTTPError) as err:
            post_json(base + "/query", {"vector": [1.0, 2.0], "k": 3})  # wrong dim
        assert err.value.code == 400
        body = json.loads(err.value.read().decode("utf-8"))
        assert body["code"] == "dim_mismatch"
        assert "message" in body

    def test_unknown_route(self, server):
        _, _, base = server
        with pytest.raises(urllib.error.HTTPError) as err:
            post_json(base + "/nope", {})
        assert err.value.code == 404
