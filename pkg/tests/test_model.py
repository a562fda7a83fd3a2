import numpy as np
import pytest

from schyena import autodiff as ad
from schyena.data import MaskPlan, make_mem_mask
from schyena.errors import ConfigurationError
from schyena.model import (
    ModelConfig,
    ModelParams,
    embed,
    extract_cell_embedding,
    forward_classify,
    forward_mem,
)
from schyena.training import AdamW, TrainConfig, classify_loss, mem_loss

from conftest import tiny_model


def simple_mask(positions, values):
    positions = np.asarray(positions, dtype=np.int64)
    return MaskPlan(positions, values[positions] == 0.0, p_nonzero=0.0)


class TestEmbed:
    def test_zero_expression_rows_are_bias_plus_gene(self, rng):
        model = tiny_model(n_genes=6, width=4)
        out = embed(np.zeros(6), None, False, model)
        expected = model.adaptor_b.data[None, :] + model.gene_table.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_value_scales_adaptor_weight(self, rng):
        model = tiny_model(n_genes=3, width=4)
        values = np.array([0.0, 2.0, 0.0])
        out = embed(values, None, False, model)
        expected_row1 = 2.0 * model.adaptor_w.data + model.adaptor_b.data + model.gene_table.data[1]
        np.testing.assert_allclose(out.data[1], expected_row1, atol=1e-12)

    def test_masked_position_ignores_value(self, rng):
        model = tiny_model(n_genes=5, width=4)
        values = rng.uniform(1, 5, 5)
        mask = simple_mask([2], values)
        base = embed(values, mask, False, model).data
        values2 = values.copy()
        values2[2] = 99.0
        again = embed(values2, mask, False, model).data
        np.testing.assert_array_equal(base, again)
        expected = model.mask_embedding.data + model.gene_table.data[2]
        np.testing.assert_allclose(base[2], expected, atol=1e-12)

    def test_cls_prepended(self, rng):
        model = tiny_model(n_genes=4, width=4)
        out = embed(rng.uniform(0, 2, 4), None, True, model)
        assert out.data.shape == (5, 4)
        np.testing.assert_allclose(out.data[0], model.cls_embedding.data, atol=1e-12)

    def test_mask_index_out_of_range(self, rng):
        model = tiny_model(n_genes=4, width=4)
        values = np.ones(4)
        mask = MaskPlan(np.array([7]), np.array([False]), p_nonzero=0.0)
        with pytest.raises(IndexError, match="7"):
            embed(values, mask, False, model)


class TestForwardMem:
    def test_untrained_model_finite_everywhere(self, rng):
        model = tiny_model(n_genes=8, width=4)
        values = rng.uniform(0, 4, 8)
        mask = make_mem_mask(values, 0.3, rng)
        out = forward_mem(values, mask, model)
        assert out.data.shape == (8,)
        assert np.isfinite(out.data).all()

    def test_output_length_independent_of_mask_size(self, rng):
        model = tiny_model(n_genes=8, width=4)
        values = rng.uniform(1, 4, 8)
        for positions in ([0], [0, 3, 5], list(range(8))):
            out = forward_mem(values, simple_mask(positions, values), model)
            assert out.data.shape == (8,)

    def test_memorizes_single_repeated_cell(self, rng):
        # fit one cell to convergence; masked predictions approach targets
        model = tiny_model(n_genes=12, width=8, n_blocks=1, order=1, n_classes=None)
        values = rng.uniform(1.0, 4.0, 12)
        mask = simple_mask([1, 4, 7], values)
        opt = AdamW(model.named_parameters(), lr=3e-2, weight_decay=0.0)
        for _ in range(150):
            model.zero_grad()
            loss = mem_loss(forward_mem(values, mask, model), values, mask)
            ad.backward(loss)
            opt.step()
        preds = forward_mem(values, mask, model).data
        assert np.abs(preds[mask.positions] - values[mask.positions]).max() < 0.05

    def test_masked_prediction_depends_on_unmasked_values(self, rng):
        model = tiny_model(n_genes=8, width=4)
        values = rng.uniform(1, 4, 8)
        mask = simple_mask([2], values)
        base = forward_mem(values, mask, model).data[2]
        for j in [0, 1, 3, 5, 7]:
            bumped = values.copy()
            bumped[j] += 0.25
            moved = forward_mem(bumped, mask, model).data[2]
            assert abs(moved - base) > 1e-12, f"position {j} had no influence"


class TestForwardClassify:
    def test_logit_count_matches_classes(self, rng):
        model = tiny_model(n_genes=6, width=4, n_classes=9)
        logits = forward_classify(rng.uniform(0, 3, 6), model)
        assert logits.data.shape == (9,)

    def test_zeroed_head_returns_bias(self, rng):
        model = tiny_model(n_genes=6, width=4, n_classes=4)
        model.cls_head_w.data[...] = 0.0
        model.cls_head_b.data[...] = [0.1, -0.2, 0.3, 0.0]
        logits = forward_classify(rng.uniform(0, 3, 6), model)
        np.testing.assert_allclose(logits.data, [0.1, -0.2, 0.3, 0.0], atol=1e-12)

    def test_cls_embedding_receives_gradient(self, rng):
        model = tiny_model(n_genes=6, width=4, n_classes=3)
        loss = classify_loss(forward_classify(rng.uniform(0, 3, 6), model), 1)
        ad.backward(loss)
        assert model.cls_embedding.grad is not None
        assert np.abs(model.cls_embedding.grad).max() > 0.0

    def test_missing_head_is_configuration_error(self, rng):
        model = tiny_model(n_genes=6, width=4, n_classes=None)
        with pytest.raises(ConfigurationError):
            forward_classify(rng.uniform(0, 3, 6), model)

    def test_logits_use_expression_values(self, rng):
        model = tiny_model(n_genes=6, width=4, n_classes=3)
        values = rng.uniform(1, 3, 6)
        a = forward_classify(values, model).data
        b = forward_classify(np.zeros(6), model).data
        assert np.abs(a - b).max() > 1e-12


class TestCellEmbedding:
    def test_duplicate_cells_identical(self, rng):
        model = tiny_model(n_genes=8, width=4)
        values = rng.uniform(0, 3, 8)
        first = extract_cell_embedding(values, model)
        second = extract_cell_embedding(values.copy(), model)
        np.testing.assert_array_equal(first, second)

    def test_dimension_is_model_width(self, rng):
        model = tiny_model(n_genes=8, width=4)
        assert extract_cell_embedding(rng.uniform(0, 3, 8), model).shape == (4,)

    def test_is_mean_of_final_positions(self, rng):
        from schyena.model import _run_blocks

        model = tiny_model(n_genes=8, width=4)
        values = rng.uniform(0, 3, 8)
        with ad.no_grad():
            final = _run_blocks(embed(values, None, False, model), model)
        np.testing.assert_allclose(
            extract_cell_embedding(values, model), final.data.mean(axis=0), atol=1e-12
        )


class TestModelInvariants:
    @pytest.mark.xfail(
        strict=True,
        reason=(
            "exact permutation covariance cannot hold: the long convolution "
            "couples positions by lag, so reordering genes changes outputs "
            "beyond a permutation even though the gene embedding is the only "
            "learned positional signal"
        ),
    )
    def test_permutation_covariance(self, rng):
        model = tiny_model(n_genes=8, width=4)
        perm = rng.permutation(8)
        permuted = model.clone()
        permuted.gene_table.data[...] = model.gene_table.data[perm]
        values = rng.uniform(0.5, 3, 8)
        base = forward_mem(values, None, model).data
        moved = forward_mem(values[perm], None, permuted).data
        np.testing.assert_allclose(moved, base[perm], atol=1e-9)

    @pytest.mark.xfail(
        strict=True,
        reason="same lag coupling: the mean over positions also shifts under reordering",
    )
    def test_permutation_leaves_cell_embedding_unchanged(self, rng):
        model = tiny_model(n_genes=8, width=4)
        perm = rng.permutation(8)
        permuted = model.clone()
        permuted.gene_table.data[...] = model.gene_table.data[perm]
        values = rng.uniform(0.5, 3, 8)
        np.testing.assert_allclose(
            extract_cell_embedding(values[perm], permuted),
            extract_cell_embedding(values, model),
            atol=1e-9,
        )

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(n_genes=0, width=4)
        with pytest.raises(ConfigurationError):
            ModelConfig(n_genes=4, width=1)

    def test_named_parameters_cover_heads_when_configured(self):
        with_head = dict(tiny_model(n_classes=3).named_parameters())
        without = dict(tiny_model(n_classes=None).named_parameters())
        assert "cls_head_w" in with_head
        assert "cls_head_w" not in without

    def test_wrong_length_input_rejected(self, rng):
        model = tiny_model(n_genes=8, width=4)
        with pytest.raises(ConfigurationError):
            forward_mem(rng.uniform(0, 1, 5), None, model)
