"""Cross-domain log anomaly detection with meta-learned prototypical encoders.

The pipeline, end to end: raw log files are ingested per source and split
70/30 (`ingest`), mined into templates with a Drain-style parse tree
(`template_miner`), labeled by semantic+fuzzy knowledge transfer
(`label_transfer`), embedded into 848-dim feature vectors (`embedding`),
reduced to the top-K features by mutual information + forest importance
(`feature_select`), rebalanced with SMOTE (`balance`), and classified by a
small dense encoder with a prototypical head, meta-trained with first-order
MAML (`neural_core`, `meta_learner`). `eval_harness` drives leave-one-source-
out evaluation; `cli` wires the stages into subcommands.
"""

__version__ = "0.1.0"
