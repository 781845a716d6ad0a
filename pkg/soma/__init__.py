'''
Singular-value-decomposed minor-components adaptation (SoMA).

The package is split the way the work is split:
    linalg       dense matrix helpers and the Jacobi SVD
    adapter      SoMA / PiSSA / LoRA adapters over frozen weights
    diagnostics  singular modulation ratio and truncation studies
    model        the residual-MLP block model and its gradients
    train        loss, AdamW with annealing weight decay, freeze policy
    bench        the synthetic domain-generalization benchmark
'''
