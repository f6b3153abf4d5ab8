import os
import tempfile
import unittest

from baselines import BaselineKind
from config_loader import config_from_mapping, load_config, parse_pruner_id
from errors import ConfigurationError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


class TestParsePrunerId(unittest.TestCase):

    def test_sharp_has_every_component(self):
        spec = parse_pruner_id("sharp")
        self.assertIsNone(spec.baseline)
        self.assertEqual(spec.components, {"segm", "posc", "regd"})

    def test_fastv_aliases(self):
        for text in ("fastv", "raw-attention-topk", " FastV "):
            with self.subTest(text=text):
                spec = parse_pruner_id(text)
                self.assertEqual(spec.name, "fastv")
                self.assertIs(spec.baseline, BaselineKind.RAW_TOPK)

    def test_ablation_is_normalized(self):
        spec = parse_pruner_id("sharp:posc+segm")
        self.assertEqual(spec.name, "sharp:segm+posc")
        config = spec.prune_config(config_from_mapping({}).prune)
        self.assertTrue(config.use_segmask)
        self.assertTrue(config.use_debias)
        self.assertFalse(config.use_dedup)

    def test_unknown(self):
        for text in ("sharp:xyz", "sharp:", "magic"):
            with self.subTest(text=text):
                with self.assertRaises(ConfigurationError) as ctx:
                    parse_pruner_id(text)
                self.assertEqual(ctx.exception.field, "run.pruner")


class TestConfigFromMapping(unittest.TestCase):

    def test_defaults(self):
        config = config_from_mapping({})
        self.assertEqual(config.pruners, ["sharp"])
        self.assertEqual(config.prune.retention, 0.25)
        self.assertEqual(config.data.frames, 12)

    def test_dotted_keys(self):
        config = config_from_mapping({
            "model.num_layers": 3,
            "data.needles": 2,
            "prune.lam": 1,
            "run.pruner": "sharp, fastv",
            "run.trials": 5,
        })
        self.assertEqual(config.model.num_layers, 3)
        self.assertEqual(config.data.needles, 2)
        self.assertEqual(config.prune.lam, 1.0)
        self.assertIsInstance(config.prune.lam, float)
        self.assertEqual(config.pruners, ["sharp", "fastv"])
        self.assertEqual(config.trials, 5)

    def test_pruner_list(self):
        self.assertEqual(config_from_mapping({"run.pruner": ["uniform", "random"]}).pruners, ["uniform", "random"])

    def test_overrides_win(self):
        config = config_from_mapping({"prune.retention": 0.5}, {"prune.retention": 0.1, "run.trials": None})
        self.assertEqual(config.prune.retention, 0.1)
        self.assertEqual(config.trials, 1)

    def test_prune_layer_follows_model(self):
        self.assertEqual(config_from_mapping({"model.prune_layer": 2}).prune.prune_layer, 2)
        self.assertEqual(config_from_mapping({"model.prune_layer": 2, "prune.prune_layer": 3}).prune.prune_layer, 3)

    def test_errors_name_the_key(self):
        cases = [
            ({"prune.retention": 1.5}, "prune.retention"),
            ({"prune.tau_merge": 0.0}, "prune.tau_merge"),
            ({"prune.merge_rule": "median"}, "prune.merge_rule"),
            ({"model.hidden_dim": 65}, "model.hidden_dim"),
            ({"data.bogus": 1}, "data.bogus"),
            ({"data.needles": "two"}, "data.needles"),
            ({"data.align_needles": 1}, "data.align_needles"),
            ({"data.source": "webcam"}, "data.source"),
            ({"data.source": "file"}, "data.path"),
            ({"data.needles": 100}, "data.needles"),
            ({"run.trials": 0}, "run.trials"),
            ({"run.pruner": "sharp,sharp"}, "run.pruner"),
            ({"run.colour": "red"}, "run.colour"),
            ({"retention": 0.2}, "retention"),
            ({"model": {"num_layers": 2}}, "model"),
        ]
        for mapping, field in cases:
            with self.subTest(mapping=mapping):
                with self.assertRaises(ConfigurationError) as ctx:
                    config_from_mapping(mapping)
                self.assertEqual(ctx.exception.field, field)


class TestLoadConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = os.path.join(self.tmp.name, "config.yaml")
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_example_configs_load(self):
        for name in ("example.yaml", "bias_probe.yaml"):
            with self.subTest(name=name):
                config = load_config(os.path.join(ROOT, "configs", name))
                self.assertGreaterEqual(config.trials, 1)

    def test_empty_file(self):
        self.assertEqual(load_config(self.write("")).pruners, ["sharp"])

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError) as ctx:
            load_config(os.path.join(self.tmp.name, "absent.yaml"))
        self.assertEqual(ctx.exception.field, "config")

    def test_bad_syntax(self):
        with self.assertRaises(ConfigurationError) as ctx:
            load_config(self.write("prune.retention: [0.2\n"))
        self.assertEqual(ctx.exception.field, "config")

    def test_top_level_list(self):
        with self.assertRaises(ConfigurationError):
            load_config(self.write("- a\n- b\n"))


if __name__ == '__main__':
    unittest.main()
