"""
This module runs the viewpoint planner steps from the command line. It behaves like ``plugin.run``, except that a
step returning its ``error`` output makes the process exit with the code of the failure category.
"""
import io
import sys
import typing

import yaml
from arcaflow_plugin_sdk import plugin

from viewpoint_planner.steps import viewpoint_schema


def _error_exit_code(output: str) -> typing.Optional[int]:
    try:
        result = yaml.safe_load(output)
    except yaml.YAMLError:
        return None
    if not isinstance(result, dict) or result.get("output_id") != "error":
        return None
    data = result.get("output_data")
    if not isinstance(data, dict) or not isinstance(data.get("exit_code"), int):
        return None
    return data["exit_code"]


def run(
    argv: typing.Sequence[str] = tuple(sys.argv),
    stdin: io.TextIOWrapper = sys.stdin,
    stdout: io.TextIOWrapper = sys.stdout,
    stderr: io.TextIOWrapper = sys.stderr,
) -> int:
    """
    :return: the SDK exit code, or the category exit code when the step reported an error.
    """
    if "--atp" in argv:
        return plugin.run(viewpoint_schema, argv, stdin, stdout, stderr)
    buffer = io.StringIO()
    exit_code = plugin.run(viewpoint_schema, argv, stdin, buffer, stderr)
    output = buffer.getvalue()
    stdout.write(output)
    if exit_code != 0:
        return exit_code
    error_code = _error_exit_code(output)
    return error_code if error_code is not None else 0


def main() -> None:
    sys.exit(run())
