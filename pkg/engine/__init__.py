"""
Numerical core of the self-synthesis pipeline

- diffcore: parameter vectors, derivatives, checkpointed inner states
- seqmodel: vocabulary, tiny causal transformer, LoRA adapters, sampling
- taskgen: affine-modular task family, prompts, parsing, verification
- scorer: bidirectional example scorer
- adapt: weighted inner adaptation loop
- metagrad: outer losses and the unroll / adjoint meta-gradient backends
- policy: rewards, group advantages and clipped generator surrogates
- store: checkpoints, metrics log, task files, results tables
- orchestrator: meta-training, test-time adaptation, baselines, evaluation
"""
