#!/usr/bin/env python3
import io
import logging
import os
import tempfile
import typing
import unittest

import numpy as np
import pandas
import yaml
from arcaflow_plugin_sdk import plugin

from viewpoint_planner import cli, harness, poseerrnet, skeleton, steps, viewsphere

NOISELESS = skeleton.DetectorParams(0.0, 0.0, 0.0)
SMALL_GRID = viewsphere.GridConfig(n_az=4, n_el=2)

SCENARIO = {
    "name": "empty",
    "size": [16.0, 16.0],
    "duration": 0.2,
    "drone_start": [5.0, 0.0, 2.5],
    "detector": {"base_noise": 0.0, "occluded_noise": 0.0, "drop_probability": 0.0},
    "subject": [{"time": 0.0}],
}


def run_cli(*argv: str) -> typing.Tuple[int, str, str]:
    stdout = io.StringIO()
    stderr = io.StringIO()
    exit_code = cli.run(("viewpoint_plugin.py",) + argv, io.StringIO(), stdout, stderr)
    return exit_code, stdout.getvalue(), stderr.getvalue()


class ViewpointPluginTest(unittest.TestCase):
    @staticmethod
    def test_serialization():
        plugin.test_object_serialization(steps.PlanInput())
        plugin.test_object_serialization(steps.SimulateInput(scenario="scenarios/dense.yaml"))
        plugin.test_object_serialization(steps.ErrorOutput("no-viewpoint", "Nothing to see", 69))
        plugin.test_object_serialization(
            steps.EpisodeSummary("dense", "ours", 10, 0.5, 12.5, 9, 3, 0, 1.25, 2, 1, 0)
        )
        plugin.test_object_serialization(
            steps.RobustnessOutput(
                "robustness.csv", [poseerrnet.RobustnessResult("T1", "scale", "jitter", 12.5, 140, 6)]
            )
        )

    def test_schema(self):
        self.assertEqual(
            {"generate-data", "train", "eval-robustness", "plan", "simulate", "evaluate"},
            set(steps.viewpoint_schema.steps.keys()),
        )
        scenario = harness.scenario_file_schema.unserialize(SCENARIO)
        self.assertEqual(0.2, scenario.duration)
        self.assertEqual(0.0, scenario.subject[0].time)

    def test_train_pipeline(self):
        with tempfile.TemporaryDirectory() as tmp:
            output_id, generated = steps.generate_data(
                steps.GenerateDataInput(
                    count=20, trials=2, grid=SMALL_GRID, detector=NOISELESS, seed=3, output_dir=tmp
                )
            )
            self.assertEqual("success", output_id)
            self.assertEqual(20, generated.pairs)
            self.assertEqual(0, generated.skipped)
            self.assertEqual(8, generated.cells)

            output_id, trained = steps.train_network(
                steps.TrainInput(
                    dataset=generated.dataset,
                    config=poseerrnet.TrainConfig(epochs=3, batch_size=4, hidden_sizes=[8]),
                    seed=5,
                    output_dir=tmp,
                )
            )
            self.assertEqual("success", output_id)
            self.assertLessEqual(trained.best_validation_loss, trained.initial_validation_loss)
            self.assertGreaterEqual(trained.rank1_agreement, 0.0)
            self.assertLessEqual(trained.rank1_agreement, 1.0)
            history = pandas.read_csv(trained.history)
            self.assertEqual([1, 2, 3], list(history["epoch"]))
            with open(trained.weights, "rb") as f:
                net = poseerrnet.PerceptionNet.load(f)
            self.assertEqual(8, net.output_size)

            output_id, robustness = steps.eval_robustness(
                steps.RobustnessInput(
                    weights=trained.weights, frames=6, bins=5, grid=SMALL_GRID, seed=1, output_dir=tmp
                )
            )
            self.assertEqual("success", output_id)
            self.assertEqual(15, len(robustness.rows))
            table = pandas.read_csv(robustness.table)
            self.assertEqual(15, len(table))
            for row in robustness.rows:
                self.assertGreaterEqual(row.percentage, 0.0)
                self.assertLessEqual(row.percentage, 100.0)
                self.assertEqual(6, row.frames_used + row.excluded)

    def test_train_malformed_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            dataset = os.path.join(tmp, "dataset.txt")
            with open(dataset, "w") as f:
                f.write(poseerrnet.DATASET_HEADER + "\n# grid: 4 2 5.0\n0.1 0.2 nan? 0.4\n")
            output_id, error = steps.train_network(steps.TrainInput(dataset=dataset, output_dir=tmp))
        self.assertEqual("error", output_id)
        self.assertEqual("invalid-argument", error.category)
        self.assertEqual(65, error.exit_code)
        self.assertIn("Line 3", error.message)

    def test_grid_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            weights = os.path.join(tmp, "weights.pen")
            with open(weights, "wb") as f:
                poseerrnet.zero_net([51, 4, 8]).save(f)
            output_id, error = steps.eval_robustness(
                steps.RobustnessInput(weights=weights, frames=2, output_dir=tmp)
            )
        self.assertEqual("error", output_id)
        self.assertEqual("invalid-argument", error.category)
        self.assertEqual(65, error.exit_code)

    def test_plan(self):
        with tempfile.TemporaryDirectory() as tmp:
            output_id, result = steps.plan(steps.PlanInput(trials=2, detector=NOISELESS, output_dir=tmp))
            self.assertEqual("success", output_id)
            self.assertGreaterEqual(result.rank, 1)
            center = np.array([0.0, 0.0, harness.HIP_HEIGHT * 1.8])
            self.assertAlmostEqual(5.0, float(np.linalg.norm(np.array(result.goal) - center)), places=6)
            trajectory = pandas.read_csv(result.trajectory)
            np.testing.assert_allclose([6.0, 0.0, 3.0], trajectory[["x", "y", "z"]].to_numpy()[0])
            with open(result.error_field) as f:
                field = viewsphere.ErrorField.from_csv(f)
            self.assertEqual(field.value(result.view_i, result.view_j), result.view_error)
            field_slice = pandas.read_csv(result.field_slice)
            self.assertEqual(["x", "y", "value"], list(field_slice.columns))
            self.assertTrue(os.path.getsize(result.distance_field) > 0)

    def test_plan_blocked_start(self):
        output_id, error = steps.plan(
            steps.PlanInput(
                drone_start=[6.0, 0.0, 3.0],
                obstacles=[harness.ObstacleSpec([6.0, 0.0, 3.0], [1.0, 1.0, 1.0])],
            )
        )
        self.assertEqual("error", output_id)
        self.assertEqual(65, error.exit_code)

    def test_cli_error_exit_code(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "plan.yaml")
            with open(path, "w") as f:
                yaml.safe_dump(
                    {
                        "drone_start": [6.0, 0.0, 3.0],
                        "obstacles": [{"center": [6.0, 0.0, 3.0], "size": [1.0, 1.0, 1.0]}],
                        "output_dir": tmp,
                    },
                    f,
                )
            exit_code, stdout, _ = run_cli("-s", "plan", "-f", path)
        self.assertEqual(65, exit_code)
        result = yaml.safe_load(stdout)
        self.assertEqual("error", result["output_id"])
        self.assertEqual("invalid-argument", result["output_data"]["category"])
        self.assertIn("ERROR viewpoint_planner.steps: Step failed (invalid-argument)", result["debug_logs"])
        package_logger = logging.getLogger("viewpoint_planner")
        handlers = [h for h in package_logger.handlers if isinstance(h, steps._StepStderrHandler)]
        self.assertEqual(1, len(handlers))

    def test_cli_missing_scenario(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "evaluate.yaml")
            with open(path, "w") as f:
                yaml.safe_dump({"scenarios": [os.path.join(tmp, "missing.yaml")], "output_dir": tmp}, f)
            exit_code, stdout, _ = run_cli("-s", "evaluate", "-f", path)
        self.assertEqual(64, exit_code)
        self.assertEqual("load", yaml.safe_load(stdout)["output_data"]["category"])

    def test_cli_usage(self):
        exit_code, _, stderr = run_cli("-s", "plan")
        self.assertEqual(64, exit_code)
        self.assertIn("--file", stderr)

    def test_cli_simulate(self):
        with tempfile.TemporaryDirectory() as tmp:
            scenario = os.path.join(tmp, "empty.yaml")
            with open(scenario, "w") as f:
                yaml.safe_dump(SCENARIO, f)
            path = os.path.join(tmp, "simulate.yaml")
            with open(path, "w") as f:
                yaml.safe_dump(
                    {
                        "scenario": scenario,
                        "episode": {"oracle_trials": 1},
                        "baselines": ["front"],
                        "output_dir": tmp,
                    },
                    f,
                )
            exit_code, stdout, _ = run_cli("-s", "simulate", "-f", path)
            self.assertEqual(0, exit_code)
            result = yaml.safe_load(stdout)
            self.assertEqual("success", result["output_id"])
            episodes = result["output_data"]["episodes"]
            self.assertEqual(["front", "ours"], [e["method"] for e in episodes])
            self.assertEqual([3, 3], [e["ticks"] for e in episodes])
            self.assertEqual(1.0, episodes[0]["pck"])
            metrics = pandas.read_csv(os.path.join(tmp, "metrics.csv"))
            self.assertEqual(2, len(metrics))
            self.assertTrue(os.path.exists(os.path.join(tmp, "empty-ours-ticks.csv")))

    def test_cli_repeatable(self):
        with tempfile.TemporaryDirectory() as tmp:
            scenario = os.path.join(tmp, "empty.yaml")
            with open(scenario, "w") as f:
                yaml.safe_dump(SCENARIO, f)
            outputs = []
            for run in ("first", "second"):
                output_dir = os.path.join(tmp, run)
                path = os.path.join(tmp, run + ".yaml")
                with open(path, "w") as f:
                    yaml.safe_dump(
                        {
                            "scenario": scenario,
                            "episode": {"oracle_trials": 2},
                            "baselines": ["side"],
                            "output_dir": output_dir,
                        },
                        f,
                    )
                exit_code, _, _ = run_cli("-s", "simulate", "-f", path)
                self.assertEqual(0, exit_code)
                files = {}
                for name in sorted(os.listdir(output_dir)):
                    with open(os.path.join(output_dir, name), "rb") as f:
                        files[name] = f.read()
                outputs.append(files)
        self.assertEqual(["empty-ours-ticks.csv", "empty-side-ticks.csv", "metrics.csv"], sorted(outputs[0]))
        self.assertEqual(outputs[0], outputs[1])

    def test_simulate_unknown_baseline(self):
        output_id, error = steps.simulate(steps.SimulateInput(scenario="unused.yaml", baselines=["above"]))
        self.assertEqual("error", output_id)
        self.assertEqual("invalid-argument", error.category)

    def test_evaluate(self):
        with tempfile.TemporaryDirectory() as tmp:
            scenario = os.path.join(tmp, "empty.yaml")
            with open(scenario, "w") as f:
                yaml.safe_dump(SCENARIO, f)
            output_id, result = steps.evaluate(
                steps.EvaluateInput(
                    scenarios=[scenario],
                    episode=harness.EpisodeConfig(oracle_trials=1),
                    seed=4,
                    output_dir=tmp,
                    tick_logs=True,
                )
            )
            self.assertEqual("success", output_id)
            with open(result.table) as f:
                table = harness.read_table_csv(f)
            self.assertEqual(list(harness.METHODS), list(table.index))
            self.assertEqual(["empty PCK", "empty MSE", "All PCK", "All MSE"], list(table.columns))
            with open(result.text) as f:
                self.assertEqual(result.rendered, f.read())
            self.assertEqual(4, len(result.episodes))
            self.assertTrue(os.path.exists(os.path.join(tmp, "empty-back-ticks.csv")))


if __name__ == "__main__":
    unittest.main()
