"""nash: a natural-language shell runtime with guardrails.

Prompts become inspectable script artifacts; artifacts execute inside an
undo-capable sandbox built on inverse overlay layers; every operation's
filesystem effects are summarized from its layer; external API calls are
gated behind batched user approval; and reusable scripts get generated
test environments via symbolic exploration of their composition code.
"""

__version__ = "0.1.0"
