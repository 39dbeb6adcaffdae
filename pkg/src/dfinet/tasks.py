"""The three prediction tasks and helpers for anything keyed by task."""

from dfinet.errors import ConfigError

TASKS = ("saliency", "edge", "skeleton")


def check_task(task: str) -> str:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
    return task


def check_tasks(tasks) -> tuple[str, ...]:
    tasks = tuple(tasks)
    if not tasks:
        raise ConfigError("tasks: must be a non-empty subset of " + repr(TASKS))
    for t in tasks:
        check_task(t)
    if len(set(tasks)) != len(tasks):
        raise ConfigError(f"tasks: duplicate entries in {tasks}")
    return tasks
