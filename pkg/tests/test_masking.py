import numpy as np
import pytest

from subnetdp import (
    StructuralUnit,
    assign_units,
    build_assignment,
    build_mini_resnet,
    build_residual_mlp,
    induce_block_param_mask,
    induce_channel_param_mask,
    load_assignment,
    save_assignment,
    validate,
)
from subnetdp.errors import ConfigError, TopologyError, ValidationError
from subnetdp.masking import (
    MaskAssignment,
    _governor_counts,
    assign_grouped_units,
    slot_windows,
)

from oracles import induced_mask_loops


def units(n, kind="block"):
    return [StructuralUnit(kind, f"u{i}") for i in range(n)]


class TestAssignUnits:
    def test_full_replication_puts_every_unit_everywhere(self):
        assignment = assign_units(units(8), 8, 8, seed=0)
        for workers in assignment.values():
            assert workers == tuple(range(8))

    def test_half_replication_layout(self):
        # layout order (identity permutation): unit j occupies the cyclic
        # window starting at slot j*P
        windows = slot_windows(8, 8, 4)
        assert windows[0] == (0, 1, 2, 3)
        loads = [sum(1 for w in windows if i in w) for i in range(8)]
        assert loads == [4] * 8

    def test_three_units_two_workers_single_copy(self):
        windows = slot_windows(3, 2, 1)
        loads = [sum(1 for w in windows if i in w) for i in range(2)]
        assert sorted(loads, reverse=True) == [2, 1]
        assignment = assign_units(units(3), 2, 1, seed=5)
        loads = [0, 0]
        for workers in assignment.values():
            loads[workers[0]] += 1
        assert sorted(loads, reverse=True) == [2, 1]

    def test_bad_replication_rejected(self):
        with pytest.raises(ConfigError):
            assign_units(units(4), 4, 5, seed=0)
        with pytest.raises(ConfigError):
            assign_units(units(4), 4, 0, seed=0)
        with pytest.raises(ConfigError):
            assign_units([], 4, 2, seed=0)

    def test_deterministic_given_seed(self):
        us = units(17)
        a1 = assign_units(us, 6, 2, seed=42)
        a2 = assign_units(us, 6, 2, seed=42)
        assert a1 == a2
        a3 = assign_units(us, 6, 2, seed=43)
        assert a1 != a3

    def test_coverage_and_balance_randomized(self):
        # 100 random configurations: exact P coverage per unit, loads
        # within one of each other
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n = int(rng.integers(2, 17))
            p = int(rng.integers(1, n + 1))
            count = int(rng.integers(n, 257))
            us = units(count)
            assignment = assign_units(us, n, p, seed=int(rng.integers(1 << 31)))
            loads = [0] * n
            for workers in assignment.values():
                assert len(set(workers)) == p
                for w in workers:
                    loads[w] += 1
            assert max(loads) - min(loads) <= 1

    def test_grouped_assignment_balances_each_group(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n = int(rng.integers(2, 9))
            p = int(rng.integers(1, n + 1))
            groups = [
                [StructuralUnit("channel", f"layer{g}", i) for i in range(int(rng.integers(n, 40)))]
                for g in range(int(rng.integers(1, 5)))
            ]
            assignment = assign_grouped_units(groups, n, p, seed=int(rng.integers(1 << 31)))
            total_loads = [0] * n
            for group in groups:
                loads = [0] * n
                for unit in group:
                    for w in assignment[unit]:
                        loads[w] += 1
                        total_loads[w] += 1
                assert max(loads) - min(loads) <= 1
            assert max(total_loads) - min(total_loads) <= 1


class TestChannelInduction:
    @pytest.fixture
    def model(self):
        return build_mini_resnet(channels=4, blocks=2, classes=3, norm_groups=2,
                                 in_channels=2, image_hw=(4, 4), seed=0)

    def test_all_active_gives_all_ones(self, model):
        channel_active = {
            layer.layer_id: np.ones((3, layer.channels), dtype=bool)
            for layer in model.topology.channel_layers
            if layer.maskable
        }
        masks = induce_channel_param_mask(model.topology, channel_active)
        assert masks.all()

    def test_two_layer_hand_expansion(self, model):
        # worker 0 drops channel 0 of block0.conv1: exactly conv1 row 0,
        # conv1 bias 0, gn1 affine 0, and conv2 input slice 0 go dead
        channel_active = {"block0.conv1": np.ones((1, 4), dtype=bool)}
        channel_active["block0.conv1"][0, 0] = False
        masks = induce_channel_param_mask(model.topology, channel_active)
        topo = model.topology
        expected_dead = np.zeros(topo.total, dtype=bool)
        w1 = topo.index["block0.conv1.w"]
        expected_dead[w1.offset : w1.offset + w1.size].reshape(w1.shape)[0] = True
        for name in ("block0.conv1.b", "block0.gn1.gamma", "block0.gn1.beta"):
            spec = topo.index[name]
            expected_dead[spec.offset] = True
        w2 = topo.index["block0.conv2.w"]
        expected_dead[w2.offset : w2.offset + w2.size].reshape(w2.shape)[:, 0] = True
        assert np.array_equal(~masks[0], expected_dead)

    def test_matches_per_parameter_oracle(self, model):
        rng = np.random.default_rng(11)
        channel_active = {}
        for layer in model.topology.channel_layers:
            if not layer.maskable:
                continue
            flags = rng.random((3, layer.channels)) > 0.4
            flags[:, 0] = True  # keep groups non-empty
            flags[:, layer.channels // 2] = True
            channel_active[layer.layer_id] = flags
        masks = induce_channel_param_mask(model.topology, channel_active)
        oracle = induced_mask_loops(model.topology, channel_active)
        assert np.array_equal(masks, oracle)

    def test_dangling_layer_rejected(self, model):
        with pytest.raises(TopologyError, match="undeclared"):
            induce_channel_param_mask(model.topology, {"nope": np.ones((2, 4), dtype=bool)})

    def test_masking_all_channels_rejected_at_validation(self, model):
        assignment = build_assignment(model.topology, "neuron", 2, 1, seed=0)
        doctored = {
            layer.layer_id: np.ones((2, layer.channels), dtype=bool)
            for layer in model.topology.channel_layers
            if layer.maskable
        }
        doctored["block0.conv1"][0, :] = False  # worker 0 loses the whole layer
        masks = induce_channel_param_mask(model.topology, doctored)
        unit_workers = dict(assignment.unit_workers)
        for unit in list(unit_workers):
            if unit.ref == "block0.conv1":
                unit_workers[unit] = (1,)
            else:
                unit_workers[unit] = (0, 1)
        broken = MaskAssignment(
            n_workers=2, replication=1, strategy="neuron", seed=0,
            topology=model.topology, unit_workers=unit_workers,
            param_masks=masks, governors=_governor_counts(model.topology, "neuron"),
        )
        with pytest.raises(ValidationError, match="no active channel"):
            validate(broken)


class TestBlockInduction:
    @pytest.fixture
    def model(self):
        return build_residual_mlp(width=6, blocks=8, classes=3, in_dim=4, seed=0)

    def test_all_ones_gives_full_model(self, model):
        active = np.ones((4, 8), dtype=bool)
        masks = induce_block_param_mask(model.topology, active)
        assert masks.all()

    def test_dropping_blocks_removes_their_parameters(self, model):
        active = np.ones((1, 8), dtype=bool)
        active[0, [2, 5]] = False
        masks = induce_block_param_mask(model.topology, active)
        block_size = sum(
            model.topology.index[n].size for n in model.topology.blocks[2].param_names
        )
        expected = model.topology.total - 2 * block_size
        assert masks[0].sum() == expected
        # frozen closed form: 2 * (6*6 + 6) per block
        assert block_size == 2 * (36 + 6)

    def test_fully_dropped_worker_rejected(self, model):
        assignment = build_assignment(model.topology, "block", 2, 1, seed=0)
        unit_workers = {u: (1,) for u in assignment.unit_workers}
        active = np.zeros((2, 8), dtype=bool)
        active[1] = True
        masks = induce_block_param_mask(model.topology, active)
        broken = MaskAssignment(
            n_workers=2, replication=1, strategy="block", seed=0,
            topology=model.topology, unit_workers=unit_workers,
            param_masks=masks, governors=_governor_counts(model.topology, "block"),
        )
        with pytest.raises(ValidationError, match="no active block"):
            validate(broken)

    def test_non_residual_block_cannot_be_masked(self, model):
        object.__setattr__(model.topology.blocks[0], "has_skip", False)
        try:
            active = np.ones((1, 8), dtype=bool)
            active[0, 0] = False
            with pytest.raises(ConfigError, match="skip"):
                induce_block_param_mask(model.topology, active)
        finally:
            object.__setattr__(model.topology.blocks[0], "has_skip", True)


class TestValidate:
    def test_cyclic_assignment_passes_by_construction(self):
        model = build_mini_resnet(channels=8, blocks=4, classes=3, norm_groups=2,
                                  in_channels=2, image_hw=(4, 4), seed=0)
        for strategy in ("neuron", "block"):
            for p in (1, 3, 8):
                if p * 4 < 8:
                    continue  # 4 units per group cannot cover 8 workers at P=1
                assignment = build_assignment(model.topology, strategy, 8, p, seed=3)
                report = validate(assignment)
                assert report.replication == p

    def test_under_replicated_unit_fails_naming_it(self):
        model = build_residual_mlp(width=6, blocks=4, classes=3, in_dim=4, seed=0)
        assignment = build_assignment(model.topology, "block", 4, 2, seed=1)
        unit_workers = dict(assignment.unit_workers)
        victim = next(iter(unit_workers))
        unit_workers[victim] = unit_workers[victim][:1]
        active = np.ones((4, 4), dtype=bool)
        for unit, workers in unit_workers.items():
            idx = int(unit.ref.removeprefix("block"))
            for i in range(4):
                active[i, idx] = i in workers
        broken = MaskAssignment(
            n_workers=4, replication=2, strategy="block", seed=1,
            topology=model.topology, unit_workers=unit_workers,
            param_masks=induce_block_param_mask(model.topology, active),
            governors=_governor_counts(model.topology, "block"),
        )
        with pytest.raises(ValidationError, match=victim.key()):
            validate(broken)

    def test_full_replication_flags_dp_equivalence(self):
        model = build_residual_mlp(width=6, blocks=4, classes=3, in_dim=4, seed=0)
        report = validate(build_assignment(model.topology, "block", 4, 4, seed=0))
        assert report.dp_equivalent
        report = validate(build_assignment(model.topology, "block", 4, 2, seed=0))
        assert not report.dp_equivalent


class TestCoverageInvariants:
    def test_randomized_unit_and_parameter_coverage(self):
        # 100 random (N, P, unit count, seed) configurations: unit-governed
        # parameters are held exactly P times, always-active ones exactly N
        rng = np.random.default_rng(99)
        for _ in range(100):
            n = int(rng.integers(2, 17))
            p = int(rng.integers(1, n + 1))
            blocks = int(rng.integers(max(2, n), 64))
            width = int(rng.integers(2, 7))
            model = build_residual_mlp(width=width, blocks=blocks, classes=3,
                                       in_dim=4, seed=0)
            assignment = build_assignment(model.topology, "block", n, p,
                                          seed=int(rng.integers(1 << 31)))
            coverage = assignment.coverage
            governed = assignment.governors >= 1
            assert np.all(coverage[governed] == p)
            assert np.all(coverage[~governed] == n)

    def test_neuron_strategy_unit_level_coverage(self):
        model = build_mini_resnet(channels=8, blocks=3, classes=4, norm_groups=2,
                                  in_channels=2, image_hw=(4, 4), seed=0)
        for p in (3, 5, 8):
            assignment = build_assignment(model.topology, "neuron", 8, p, seed=5)
            single = assignment.governors == 1
            assert np.all(assignment.coverage[single] == p)
            assert np.all(assignment.coverage[assignment.governors == 0] == 8)
            # doubly governed conv2 input slices may fall below P but the
            # per-unit replication is always exact
            for workers in assignment.unit_workers.values():
                assert len(workers) == p

    def test_masks_are_immutable(self):
        model = build_residual_mlp(width=6, blocks=4, classes=3, in_dim=4, seed=0)
        assignment = build_assignment(model.topology, "block", 4, 2, seed=0)
        with pytest.raises(ValueError):
            assignment.param_masks[0, 0] = False
        view = assignment.worker_view(1)
        with pytest.raises(ValueError):
            view.block_active[0] = False

    def test_requerying_views_returns_identical_bits(self):
        model = build_mini_resnet(channels=8, blocks=2, classes=3, norm_groups=2,
                                  in_channels=2, image_hw=(4, 4), seed=0)
        assignment = build_assignment(model.topology, "neuron", 4, 2, seed=9)
        v1 = assignment.worker_view(2)
        v2 = assignment.worker_view(2)
        assert np.array_equal(v1.param_mask_bool, v2.param_mask_bool)
        for layer_id in v1.channel_active:
            assert np.array_equal(v1.channel_active[layer_id], v2.channel_active[layer_id])


class TestSerialization:
    def test_json_round_trip(self, tmp_path):
        model = build_mini_resnet(channels=8, blocks=3, classes=4, norm_groups=2,
                                  in_channels=2, image_hw=(4, 4), seed=0)
        for strategy in ("neuron", "block"):
            assignment = build_assignment(model.topology, strategy, 8, 5, seed=21)
            path = tmp_path / f"{strategy}.json"
            save_assignment(assignment, path)
            loaded = load_assignment(path, model.topology)
            assert loaded.unit_workers == assignment.unit_workers
            assert np.array_equal(loaded.param_masks, assignment.param_masks)
            assert loaded.replication == assignment.replication
