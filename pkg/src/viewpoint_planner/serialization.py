"""
This module holds the file helpers shared by the steps: where outputs go and how floats are written. Scenario files
are read with ``arcaflow_plugin_sdk.serialization.load_from_file``.
"""
import os
import typing

OUTPUT_DIR_ENV = "VIEWPOINT_PLANNER_OUTPUT_DIR"


def resolve_output_dir(output_dir: typing.Optional[str]) -> str:
    """
    This function picks the directory step outputs are written to: the explicit value, else the
    ``VIEWPOINT_PLANNER_OUTPUT_DIR`` environment variable, else the working directory. The directory is created if
    it does not exist.

    :param output_dir: the directory requested in the step input, if any.
    :return: the directory to write to.
    """
    if output_dir is None or output_dir == "":
        output_dir = os.environ.get(OUTPUT_DIR_ENV, ".")
    os.makedirs(output_dir, exist_ok=True)
    return output_dir


def format_float(value: float) -> str:
    """
    :return: the shortest decimal text that reads back to exactly ``value``.
    """
    return repr(float(value))
