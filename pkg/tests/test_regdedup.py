import csv
import io
import math
import unittest

import numpy as np

from attention_core import ModelConfig, ScoreVector, init_model
from errors import ConfigurationError, ShapeError
from poscalib import BiasProfile, ProfileLayout, debias
from regdedup import (
    MERGE_KEEP_PIVOT,
    MERGE_MEAN,
    Cluster,
    ClusterSet,
    PruneConfig,
    RegisterEntry,
    RegisterSet,
    StageStats,
    cluster_scan,
    dedup,
    diversity_score,
    postfill,
    prefilter,
    prune_pipeline,
    refine_segments,
    retention_count,
    stats_to_csv,
    topk_select,
)
from segmask import partition_from_boundaries, single_segment
from validator import validate_result
from videogen import SceneSpec, SyntheticSpec, generate, homogeneous


def unit_at(degrees):
    rad = math.radians(degrees)
    return np.array([math.cos(rad), math.sin(rad)])


def entry(index, vector, absorbed=()):
    return RegisterEntry(index=index, vector=np.asarray(vector, dtype=np.float64), absorbed=list(absorbed))


class TestRetentionCount(unittest.TestCase):

    def test_rounding(self):
        self.assertEqual(retention_count(0.25, 16), 4)
        self.assertEqual(retention_count(0.1, 25), 3)  # 2.5 rounds up
        self.assertEqual(retention_count(1.0, 7), 7)

    def test_keeps_nothing(self):
        with self.assertRaises(ConfigurationError):
            retention_count(0.05, 10)


class TestTopK(unittest.TestCase):

    def test_highest_scores(self):
        scores = ScoreVector(values=np.array([0.1, 0.5, 0.4, 0.3], dtype=np.float32), layer=1)
        self.assertEqual(topk_select(scores, 2).indices(), [1, 2])

    def test_ties_go_to_smaller_index(self):
        scores = ScoreVector(values=np.ones(5, dtype=np.float32), layer=1)
        self.assertEqual(topk_select(scores, 2).indices(), [0, 1])

    def test_grouped_by_segment(self):
        scores = ScoreVector(values=np.array([5, 0, 0, 4, 3, 0], dtype=np.float32), layer=1)
        selected = topk_select(scores, 3, partition_from_boundaries([1], 3, 2))
        self.assertEqual(selected.counts(), [1, 2])
        self.assertEqual([e.index for e in selected.segments[1]], [3, 4])

    def test_k_out_of_range(self):
        scores = ScoreVector(values=np.ones(3, dtype=np.float32), layer=1)
        with self.assertRaises(ShapeError):
            topk_select(scores, 0)
        with self.assertRaises(ShapeError):
            topk_select(scores, 4)

    def test_ranking_follows_debiased_scores(self):
        layout = ProfileLayout(frames=5, tokens_per_frame=4, n_text=1, prune_layer=1)
        bias = 0.5 * np.arange(20, dtype=np.float32)
        raw = bias.copy()
        raw[8] += 3.0
        profile = BiasProfile(bias=bias, layout=layout, mask_signature="m", weights_checksum="w")
        scores = ScoreVector(values=raw, layer=1)
        self.assertEqual(topk_select(debias(scores, profile, lam=0.0), 4).indices(), [16, 17, 18, 19])
        self.assertIn(8, topk_select(debias(scores, profile, lam=0.6), 4).indices())


class TestPrefilter(unittest.TestCase):

    def setUp(self):
        self.tokens = np.array([
            [1.0, 0.0],   # register
            [1.0, 0.1],   # close to 0
            [0.1, 1.0],   # close to 3
            [0.0, 1.0],   # register
            [1.0, 1.5],   # nearer to 3 than to 0
            [-1.0, 0.0],  # far from both
        ])

    def registers(self):
        return [entry(0, self.tokens[0]), entry(3, self.tokens[3])]

    def test_absorbs_into_best_register(self):
        regs, remaining = prefilter(self.tokens, (0, 6), self.registers(), 0.7, MERGE_MEAN)
        self.assertEqual([r.absorbed for r in regs], [[1], [2, 4]])
        self.assertEqual(remaining, [5])
        np.testing.assert_allclose(regs[0].vector, [1.0, 0.05])

    def test_keep_pivot_vectors(self):
        regs, _ = prefilter(self.tokens, (0, 6), self.registers(), 0.7, MERGE_KEEP_PIVOT)
        np.testing.assert_allclose(regs[0].vector, [1.0, 0.0])
        np.testing.assert_allclose(regs[1].vector, [0.0, 1.0])

    def test_inputs_untouched(self):
        registers = self.registers()
        prefilter(self.tokens, (0, 6), registers, 0.7)
        self.assertEqual([r.absorbed for r in registers], [[], []])

    def test_only_own_segment(self):
        regs, remaining = prefilter(self.tokens, (0, 3), [entry(0, self.tokens[0])], 0.7)
        self.assertEqual(regs[0].absorbed, [1])
        self.assertEqual(remaining, [2])

    def test_no_registers(self):
        regs, remaining = prefilter(self.tokens, (0, 6), [], 0.7)
        self.assertEqual(regs, [])
        self.assertEqual(remaining, list(range(6)))


class TestDedup(unittest.TestCase):

    def setUp(self):
        theta = math.degrees(math.acos(0.9))
        self.registers = [entry(0, unit_at(0)), entry(1, unit_at(theta)), entry(2, unit_at(2 * theta))]

    def test_both_rules_agree_at_0_8(self):
        for rule in (MERGE_MEAN, MERGE_KEEP_PIVOT):
            with self.subTest(rule=rule):
                out = dedup(self.registers, 0.8, rule)
                self.assertEqual([(r.index, r.absorbed) for r in out], [(0, [1]), (2, [])])

    def test_rules_diverge_at_0_75(self):
        mean = dedup(self.registers, 0.75, MERGE_MEAN)
        self.assertEqual([(r.index, r.absorbed) for r in mean], [(0, [1, 2])])
        keep = dedup(self.registers, 0.75, MERGE_KEEP_PIVOT)
        self.assertEqual([(r.index, r.absorbed) for r in keep], [(0, [1]), (2, [])])
        np.testing.assert_allclose(keep[0].vector, unit_at(0))

    def test_weighted_running_mean(self):
        pivot = entry(0, [1.0, 0.0], absorbed=[5, 6])
        other = entry(1, [1.0, 1.0])
        out = dedup([other, pivot], 0.7, MERGE_MEAN)
        self.assertEqual(len(out), 1)
        self.assertEqual(out[0].absorbed, [1, 5, 6])
        np.testing.assert_allclose(out[0].vector, [1.0, 0.25])

    def test_never_merges_at_threshold_one(self):
        same = [entry(i, [1.0, 2.0]) for i in range(4)]
        self.assertEqual(len(dedup(same, 1.0)), 4)

    def test_empty(self):
        self.assertEqual(dedup([], 0.8), [])


class TestClusterScan(unittest.TestCase):

    def test_hand_example(self):
        tokens = np.stack([unit_at(a) for a in (0, 30, 100, 120, 200)])
        clusters = cluster_scan(tokens, [0, 1, 2, 3, 4], 0.4)
        self.assertEqual([c.members for c in clusters.clusters], [[0, 1], [2, 3], [4]])
        np.testing.assert_allclose(clusters.clusters[0].center, (unit_at(0) + unit_at(30)) / 2)

    def test_empty(self):
        self.assertEqual(cluster_scan(np.zeros((0, 2)), [], 0.4).clusters, [])


class TestPostfill(unittest.TestCase):

    def test_diversity_spot_values(self):
        r = np.array([1.0, 0.0])
        self.assertAlmostEqual(diversity_score(r, 1, [r], 0.008), 0.008)
        self.assertAlmostEqual(diversity_score(np.array([0.0, 1.0]), 3, [r], 0.008), 1.024)

    def test_diversity_needs_registers(self):
        with self.assertRaises(ShapeError):
            diversity_score(np.ones(2), 1, [], 0.008)

    def hand_clusters(self):
        def center(c):
            return np.array([c, math.sqrt(1 - c * c)])
        return ClusterSet(clusters=[Cluster([5], center(-0.012)), Cluster([6, 7], center(0.558)),
                                    Cluster([8, 9, 10], center(0.178))])

    def test_most_diverse_first(self):
        clusters = self.hand_clusters()
        filled, shortfall = postfill([entry(0, [1.0, 0.0])], clusters, 3, 0.008)
        self.assertEqual(shortfall, 0)
        self.assertEqual([e.index for e in filled], [0, 5, 8])
        self.assertEqual(filled[2].absorbed, [9, 10])
        self.assertEqual(filled[2].source, "cluster")
        np.testing.assert_allclose(clusters.diversity, [1.02, 0.458, 0.846], atol=1e-9)

    def test_shortfall_when_clusters_run_out(self):
        clusters = ClusterSet(clusters=[Cluster([4], np.array([0.0, 1.0]))])
        filled, shortfall = postfill([entry(0, [1.0, 0.0])], clusters, 3, 0.008)
        self.assertEqual(len(filled), 2)
        self.assertEqual(shortfall, 1)

    def test_target_below_deduped(self):
        with self.assertRaises(ValueError):
            postfill([entry(0, [1.0, 0.0]), entry(1, [0.0, 1.0])], ClusterSet(), 1, 0.008)


def reference_refine(tokens, regs, tau_f, tau_m, tau_c, beta, rule):
    """Straight-line re-statement of prefilter -> dedup -> cluster -> post-fill on one segment."""
    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    groups = {r: [r] for r in regs}
    rest = []
    for i in range(len(tokens)):
        if i in groups:
            continue
        sims = [cos(tokens[i], tokens[r]) for r in regs]
        j = int(np.argmax(sims))
        if sims[j] > tau_f:
            groups[regs[j]].append(i)
        else:
            rest.append(i)
    vec = {r: tokens[sorted(groups[r])].mean(axis=0) if rule == MERGE_MEAN else tokens[r] for r in regs}

    survivors = []
    for r in sorted(regs):
        if survivors and cos(survivors[-1][1], vec[r]) > tau_m:
            idx, v, members = survivors[-1]
            if rule == MERGE_MEAN:
                v = (len(members) * v + len(groups[r]) * vec[r]) / (len(members) + len(groups[r]))
            survivors[-1] = (idx, v, members + groups[r])
        else:
            survivors.append((r, vec[r], list(groups[r])))

    clusters = []
    for i in rest:
        if clusters and cos(clusters[-1][1], tokens[i]) > tau_c:
            members = clusters[-1][0] + [i]
            clusters[-1] = (members, tokens[members].mean(axis=0))
        else:
            clusters.append(([i], tokens[i]))

    need = len(regs) - len(survivors)
    divs = [1 - np.mean([cos(c, v) for _, v, _ in survivors]) + beta * len(m) for m, c in clusters]
    order = sorted(range(len(clusters)), key=lambda k: (-divs[k], clusters[k][0][0]))
    picked = survivors + [(clusters[k][0][0], clusters[k][1], clusters[k][0]) for k in order[:need]]
    return sorted(picked, key=lambda p: p[0])


class TestRefineOracle(unittest.TestCase):

    def test_matches_reference(self):
        rng = np.random.default_rng(99)
        for case in range(500):
            n = int(rng.integers(2, 13))
            d = int(rng.integers(2, 5))
            tokens = rng.standard_normal((n, d)) + rng.uniform(0.0, 1.5)
            k = int(rng.integers(1, n + 1))
            regs = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
            config = PruneConfig(tau_filter=float(rng.uniform(0.3, 0.95)), tau_merge=float(rng.uniform(0.3, 0.95)),
                                 tau_cluster=float(rng.uniform(0.1, 0.9)), beta=0.008,
                                 merge_rule=MERGE_MEAN if case % 2 else MERGE_KEEP_PIVOT)
            selected = RegisterSet(segments=[[entry(i, tokens[i]) for i in regs]], stage="selected")
            got = refine_segments(tokens, single_segment(n, 1), selected, config, StageStats())
            want = reference_refine(tokens, regs, config.tau_filter, config.tau_merge, config.tau_cluster,
                                    config.beta, config.merge_rule)
            with self.subTest(case=case):
                self.assertEqual([(e.index, sorted(e.members)) for e in got],
                                 [(idx, sorted(members)) for idx, _, members in want])
                for e, (_, v, _) in zip(got, want):
                    np.testing.assert_allclose(e.vector, v, rtol=1e-9, atol=1e-12)


class TestPrunePipeline(unittest.TestCase):

    def setUp(self):
        self.cfg = ModelConfig()
        self.weights = init_model(self.cfg)
        spec = SyntheticSpec(scenes=[SceneSpec(4, 0), SceneSpec(4, 1), SceneSpec(4, 2)], noise=0.05)
        self.seq, self.truth = generate(spec, self.cfg)

    def test_full_retention_keeps_everything(self):
        result = prune_pipeline(self.seq, self.weights, PruneConfig(retention=1.0, tau_merge=1.0))
        self.assertEqual(result.retained_indices, list(range(48)))
        self.assertEqual(result.absorbed_indices, [])
        self.assertEqual(result.hidden.shape, (52, 64))

    def test_homogeneous_collapses_to_one_register(self):
        seq = homogeneous(4, 4, 2, self.cfg)
        result = prune_pipeline(seq, self.weights, PruneConfig(retention=0.25))
        self.assertEqual(len(result.entries), 1)
        self.assertEqual(result.stats.counts["selected"], [4])
        self.assertEqual(result.stats.counts["prefiltered"], [4])
        self.assertEqual(result.stats.counts["deduped"], [1])
        self.assertEqual(result.stats.counts["filled"], [1])
        self.assertEqual(result.stats.shortfall, [3])
        self.assertEqual(len(result.index_map), 16)
        self.assertEqual(validate_result(result), [])

    def test_segments_follow_scenes(self):
        result = prune_pipeline(self.seq, self.weights, PruneConfig(retention=0.25), forward=False)
        self.assertEqual(result.partition, self.truth)
        self.assertIsNone(result.hidden)

    def test_debias_only_changes_ranking(self):
        on = prune_pipeline(self.seq, self.weights, PruneConfig(use_debias=True), forward=False)
        off = prune_pipeline(self.seq, self.weights, PruneConfig(use_debias=False), forward=False)
        np.testing.assert_array_equal(on.text, off.text)
        np.testing.assert_array_equal(on.raw_scores.values, off.raw_scores.values)
        self.assertTrue(on.scores.debiased)
        self.assertFalse(off.scores.debiased)

    def test_without_dedup_keeps_topk(self):
        result = prune_pipeline(self.seq, self.weights, PruneConfig(retention=0.25, use_dedup=False), forward=False)
        self.assertEqual(len(result.entries), 12)
        self.assertEqual(result.absorbed_indices, [])
        self.assertEqual(len(result.dropped_indices), 36)

    def test_workers_do_not_change_result(self):
        one = prune_pipeline(self.seq, self.weights, PruneConfig(workers=1))
        four = prune_pipeline(self.seq, self.weights, PruneConfig(workers=4))
        self.assertEqual([e.members for e in one.entries], [e.members for e in four.entries])
        np.testing.assert_array_equal(one.retained_visual, four.retained_visual)
        np.testing.assert_array_equal(one.hidden, four.hidden)

    def test_timings_cover_stages(self):
        result = prune_pipeline(self.seq, self.weights, PruneConfig())
        stages = ("attn", "filter", "dedup", "fill", "forward")
        self.assertTrue(all(result.timings[s] >= 0.0 for s in stages))
        self.assertAlmostEqual(sum(result.timings[s] for s in stages), result.timings["total"], places=9)

    def test_retained_sequence_keeps_positions(self):
        result = prune_pipeline(self.seq, self.weights, PruneConfig(), forward=False)
        hidden, positions = result.retained_sequence()
        self.assertEqual(list(positions[:len(result.entries)]), result.retained_indices)
        self.assertEqual(list(positions[len(result.entries):]), [48, 49, 50, 51])
        self.assertEqual(hidden.shape[0], len(positions))

    def test_prune_layer_beyond_model(self):
        with self.assertRaises(ConfigurationError):
            prune_pipeline(self.seq, self.weights, PruneConfig(prune_layer=5))

    def test_provenance_over_random_configs(self):
        rng = np.random.default_rng(7)
        for case in range(200):
            scenes = [SceneSpec(int(rng.integers(1, 4)), s) for s in range(int(rng.integers(1, 4)))]
            spec = SyntheticSpec(scenes=scenes, tokens_per_frame=int(rng.integers(2, 5)),
                                 noise=float(rng.uniform(0.0, 0.3)), data_seed=case)
            seq, _ = generate(spec, self.cfg)
            config = PruneConfig(
                retention=float(rng.uniform(max(0.1, 1.0 / seq.n_visual), 1.0)),
                tau_seg=float(rng.uniform(0.5, 1.0)),
                tau_filter=float(rng.uniform(0.2, 1.0)),
                tau_merge=float(rng.uniform(0.2, 1.0)),
                tau_cluster=float(rng.uniform(0.1, 1.0)),
                merge_rule=MERGE_MEAN if case % 2 else MERGE_KEEP_PIVOT,
                use_segmask=bool(rng.integers(0, 2)),
                use_debias=bool(rng.integers(0, 2)),
                prune_layer=int(rng.integers(1, 3)),
            )
            result = prune_pipeline(seq, self.weights, config, forward=False)
            with self.subTest(case=case):
                self.assertEqual(validate_result(result), [])
                self.assertLessEqual(len(result.entries), retention_count(config.retention, seq.n_visual))


class TestStatsCsv(unittest.TestCase):

    def test_homogeneous_rows(self):
        cfg = ModelConfig()
        result = prune_pipeline(homogeneous(4, 4, 2, cfg), init_model(cfg), PruneConfig(retention=0.25),
                                forward=False)
        buf = io.StringIO()
        stats_to_csv(result, buf)
        rows = list(csv.reader(io.StringIO(buf.getvalue())))
        self.assertEqual(rows, [
            ["stage", "segment_id", "count"],
            ["selected", "0", "4"],
            ["prefiltered", "0", "4"],
            ["deduped", "0", "1"],
            ["filled", "0", "1"],
            ["achieved_retention", "all", "0.062500"],
        ])


if __name__ == '__main__':
    unittest.main()
