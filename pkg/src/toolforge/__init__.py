"""toolforge: synthetic tool-use trajectories from a tool corpus.

The pipeline refines a raw tool corpus (cluster, discriminate, merge),
role-plays user / agent / tool-server conversations over it, filters them
with self-reflection and validator consensus, scores rollouts with a gated
composite reward and steers the next synthesis batch toward the cells the
policy still gets wrong.
"""

__version__ = "0.1.0"
