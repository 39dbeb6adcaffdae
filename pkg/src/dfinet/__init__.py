"""Single-network dense prediction for saliency, edges, and skeletons.

One shared backbone feeds per-task branches that pick their own mixture of
backbone stages at runtime (sparse, content-dependent selection), followed by
a task-adaptive attention gate and a per-task prediction head.
"""

from dfinet.tasks import TASKS

__all__ = ["TASKS"]
__version__ = "0.1.0"
