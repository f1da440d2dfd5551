import os
import tempfile
import unittest
from unittest import mock

from viewpoint_planner import serialization


class SerializationTest(unittest.TestCase):
    def test_resolve_output_dir(self):
        with tempfile.TemporaryDirectory() as tmp:
            explicit = os.path.join(tmp, "explicit")
            self.assertEqual(explicit, serialization.resolve_output_dir(explicit))
            self.assertTrue(os.path.isdir(explicit))
            from_env = os.path.join(tmp, "env")
            with mock.patch.dict(os.environ, {serialization.OUTPUT_DIR_ENV: from_env}):
                self.assertEqual(from_env, serialization.resolve_output_dir(None))
                self.assertEqual(from_env, serialization.resolve_output_dir(""))
            self.assertTrue(os.path.isdir(from_env))

    def test_format_float(self):
        for value in (0.1, 1.0 / 3.0, -2.5e-17, 12345.678):
            self.assertEqual(value, float(serialization.format_float(value)))


if __name__ == "__main__":
    unittest.main()
