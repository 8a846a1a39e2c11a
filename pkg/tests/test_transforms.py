import numpy as np
import pytest

from ghostspec.errors import InputError
from ghostspec.similarity import SimilarityParams, classify, ghostspec_mse
from ghostspec.spectral import singular_values, spectral_mse
from ghostspec.transforms import (
    AttackSpec,
    SyntheticFamilySpec,
    apply_mlp_permutation,
    apply_qk_attack,
    apply_vo_attack,
    attack_checkpoint,
    attack_model,
    base_model,
    depth_varying_corpus,
    generate_family,
    model_forward,
    random_orthogonal,
)
from ghostspec.fingerprint import extract_fingerprint
from ghostspec.weights_io import Checkpoint, discover_layout, open_checkpoint

from .conftest import fingerprint_of

QK = AttackSpec("qk_perhead", seed=5, head_dim=16)
VO = AttackSpec("vo_blockdiag", seed=6, head_dim=16)


def rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(a))


@pytest.fixture(scope="module")
def three_layer():
    return base_model(SyntheticFamilySpec(d_model=64, num_layers=3, num_heads=4, head_dim=16, seed=3))


class TestAttackSpec:
    @pytest.mark.parametrize("kwargs", [{"kind": "rotate"}, {"kind": "qk_perhead", "scale_range": (2.0, 1.0)},
                                        {"kind": "qk_perhead", "scale_range": (0.0, 1.0)},
                                        {"kind": "qk_perhead", "head_dim": 0}])
    def test_validation(self, kwargs):
        with pytest.raises(InputError):
            AttackSpec(**kwargs)


class TestQkAttack:
    def test_identity_blocks(self, small_model):
        layer = small_model.layer(0)
        wq, wk = apply_qk_attack(layer["q"], layer["k"], QK, blocks=np.repeat(np.eye(16)[None], 4, axis=0))
        np.testing.assert_array_equal(wq, layer["q"])
        np.testing.assert_array_equal(wk, layer["k"])

    def test_product_spectrum_kept(self, small_model):
        layer = small_model.layer(1)
        wq, wk = apply_qk_attack(layer["q"], layer["k"], QK)
        assert rel(singular_values(layer["q"].T @ layer["k"]), singular_values(wq.T @ wk)) <= 1e-8

    def test_raw_spectrum_moves(self, small_model):
        layer = small_model.layer(1)
        wq, _ = apply_qk_attack(layer["q"], layer["k"], QK)
        a, b = singular_values(layer["q"]), singular_values(wq)
        assert spectral_mse(a / a[0], b / b[0]) > 1e-4

    def test_indivisible_heads(self):
        with pytest.raises(InputError, match="divisible"):
            apply_qk_attack(np.zeros((10, 4)), np.zeros((10, 4)), QK)

    def test_wrong_kind(self):
        with pytest.raises(InputError):
            apply_qk_attack(np.zeros((16, 4)), np.zeros((16, 4)), VO)

    def test_gqa_logits_unchanged(self, rng):
        spec = AttackSpec("qk_perhead", seed=1, head_dim=4)
        wq, wk = rng.standard_normal((16, 8)), rng.standard_normal((8, 8))
        aq, ak = apply_qk_attack(wq, wk, spec)
        expand = lambda w: np.repeat(w.reshape(2, 4, 8), 2, axis=0).reshape(16, 8)
        np.testing.assert_allclose(aq.T @ expand(ak), wq.T @ expand(wk), atol=1e-12)


class TestVoAttack:
    def test_uniform_scale(self, small_model):
        layer = small_model.layer(0)
        blocks = np.repeat(2 * np.eye(16)[None], 4, axis=0)
        wv, wo = apply_vo_attack(layer["v"], layer["o"], VO, blocks=blocks)
        np.testing.assert_array_equal(wv, 2 * layer["v"])
        np.testing.assert_array_equal(wo, layer["o"] / 2)

    def test_product_preserved(self, small_model):
        layer = small_model.layer(2)
        wv, wo = apply_vo_attack(layer["v"], layer["o"], VO)
        ref = layer["o"] @ layer["v"]
        assert np.max(np.abs(wo @ wv - ref)) <= 1e-9 * np.max(np.abs(ref))

    def test_zero_block_rejected(self, small_model):
        layer = small_model.layer(0)
        blocks = np.repeat(np.eye(16)[None], 4, axis=0)
        blocks[2] = 0.0
        with pytest.raises(InputError, match="singular"):
            apply_vo_attack(layer["v"], layer["o"], VO, blocks=blocks)


class TestMlpPermutation:
    def test_single_unit_is_identity(self, rng):
        up, down = rng.standard_normal((1, 4)), rng.standard_normal((3, 1))
        new_up, new_down = apply_mlp_permutation(up, down, seed=8)
        np.testing.assert_array_equal(new_up, up)
        np.testing.assert_array_equal(new_down, down)

    def test_function_and_spectrum(self, small_model, rng):
        layer = small_model.layer(0)
        up, down = apply_mlp_permutation(layer["up"], layer["down"], seed=3)
        assert sorted(map(tuple, up)) == sorted(map(tuple, layer["up"]))
        x = rng.standard_normal((5, 64))
        mlp = lambda u, d: np.maximum(x @ u.T, 0) @ d.T
        np.testing.assert_allclose(mlp(up, down), mlp(layer["up"], layer["down"]), atol=1e-12)
        # permuting only the up rows breaks the map
        assert np.max(np.abs(mlp(up, layer["down"]) - mlp(layer["up"], layer["down"]))) > 1e-3
        np.testing.assert_allclose(singular_values(up), singular_values(layer["up"]), rtol=1e-13)

    def test_mismatch(self):
        with pytest.raises(InputError, match="hidden dimension"):
            apply_mlp_permutation(np.zeros((4, 2)), np.zeros((2, 3)), 0)


class TestFunctionalPreservation:
    @pytest.mark.parametrize("kind", ["qk_perhead", "vo_blockdiag", "mlp_permute", "scale_uniform"])
    def test_outputs_unchanged(self, three_layer, kind, rng):
        attacked = attack_model(three_layer, AttackSpec(kind, seed=17, head_dim=16))
        x = rng.standard_normal((6, 64))
        assert np.max(np.abs(model_forward(three_layer, x) - model_forward(attacked, x))) <= 1e-6

    @pytest.mark.parametrize("kind", ["qk_perhead", "vo_blockdiag", "mlp_permute", "scale_uniform"])
    def test_weights_change(self, three_layer, kind):
        attacked = attack_model(three_layer, AttackSpec(kind, seed=17, head_dim=16, scale_range=(1.5, 2.0)))
        changes = [
            np.linalg.norm(attacked.tensors[n] - w) / np.linalg.norm(w) for n, w in three_layer.tensors.items()
        ]
        assert max(changes) > 1e-3

    def test_orthogonal_sampler(self, rng):
        q = random_orthogonal(7, rng)
        np.testing.assert_allclose(q.T @ q, np.eye(7), atol=1e-13)


class TestFamilies:
    def test_none_is_identical(self):
        fam = generate_family(SyntheticFamilySpec(num_layers=3))
        for name, w in fam["base"].tensors.items():
            np.testing.assert_array_equal(fam["derivative"].tensors[name], w)

    def test_prune(self):
        fam = generate_family(SyntheticFamilySpec(perturbation="layer_prune", num_changed=2))
        assert fam["derivative"].num_layers == 6

    def test_duplicate(self):
        fam = generate_family(SyntheticFamilySpec(perturbation="layer_duplicate", num_changed=3))
        assert fam["derivative"].num_layers == 11

    def test_deterministic(self):
        spec = SyntheticFamilySpec(perturbation="low_rank_update", num_layers=2, seed=4)
        a, b = generate_family(spec), generate_family(spec)
        for name in a["derivative"].tensors:
            np.testing.assert_array_equal(a["derivative"].tensors[name], b["derivative"].tensors[name])

    @pytest.mark.parametrize("kwargs", [{"d_model": 60}, {"perturbation": "melt"}, {"num_kv_heads": 3},
                                        {"perturbation": "layer_prune", "num_changed": 8}])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(InputError):
            SyntheticFamilySpec(**kwargs)

    def test_finetune_separates_from_independent(self):
        fam = generate_family(SyntheticFamilySpec(perturbation="low_rank_update", magnitude=0.01, seed=0))
        other = base_model(SyntheticFamilySpec(seed=99), name="other")
        base = fingerprint_of(fam["base"])
        related = ghostspec_mse(base, fingerprint_of(fam["derivative"]))[0]
        unrelated = ghostspec_mse(base, fingerprint_of(other))[0]
        assert classify(related, 0.85) and not classify(unrelated, 0.85)

    def test_written_checkpoint_round_trips(self, small_model, tmp_path):
        path = small_model.write(tmp_path / "m")
        handle = open_checkpoint(path)
        assert handle.config["num_hidden_layers"] == 8
        for name, w in small_model.tensors.items():
            np.testing.assert_array_equal(handle.load_matrix(name), w)

    def test_attack_checkpoint_on_disk(self, small_model, small_fp, tmp_path):
        handle = open_checkpoint(small_model.write(tmp_path / "m"))
        tensors = attack_checkpoint(handle, discover_layout(handle), [QK, VO])
        attacked = Checkpoint.from_arrays(tensors, handle.config)
        fp = extract_fingerprint(attacked, discover_layout(attacked))
        assert ghostspec_mse(small_fp, fp)[1] < 1e-12


@pytest.fixture(scope="module")
def corpus():
    return depth_varying_corpus(seed=0)


class TestDepthCorpus:
    def test_members(self, corpus):
        models, pairs = corpus
        depths = {name: m.num_layers for name, m in models.items()}
        assert depths == {"base": 32, "pruned-2": 30, "pruned-8": 24, "pruned-10": 22, "expanded-4": 36,
                          "expanded-8": 40, "independent-1": 28, "independent-2": 28}
        assert sum(related for *_, related in pairs) == 5 and len(pairs) == 7

    def test_verdicts(self, corpus):
        models, pairs = corpus
        fps = {name: fingerprint_of(m) for name, m in models.items()}
        for a, b, related in pairs:
            score = ghostspec_mse(fps[a], fps[b], SimilarityParams())[0]
            assert classify(score, 0.85) == related, (b, score)
