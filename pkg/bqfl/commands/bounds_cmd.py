# bqfl/commands/bounds_cmd.py
import logging
from typing import Dict, List

from ..analytics import bound_sweep, encoding_time, fedavg_bound, total_time_bound
from ..chain import StakeTable, block_time, expected_block_time
from ..config import RunConfig, config_from_command
from ..schemas import BoundConstants, Command

# Initialize logger for this module
logger = logging.getLogger(__name__)

SWEEP_ROUNDS = (1, 2, 5, 10, 20, 50, 100)


def miner_block_times(cfg: RunConfig) -> Dict[int, float]:
    """Per-miner block times: configured values, or max(t, L) + t with L the mean latency."""
    miner_ids = [cfg.n_workers + j for j in range(cfg.n_miners)]
    if cfg.bound_node_times_s is not None:
        return dict(zip(miner_ids, cfg.bound_node_times_s))
    t = block_time(cfg.bound_t_create_s, cfg.latency_mean_s)
    return {m: t for m in miner_ids}


def _format_constants(c: BoundConstants) -> str:
    return (
        f"L_smooth={c.L_smooth!r} mu={c.mu!r} sigma_k={list(c.sigma_k)!r} p_k={list(c.p_k)!r} "
        f"Gamma={c.Gamma!r} G={c.G!r} E={c.E_local} T={c.T_rounds} theta_gap={c.theta_gap!r}"
    )


def bounds_report(cfg: RunConfig) -> List[str]:
    c = cfg.bound_constants()
    per_node_T = miner_block_times(cfg)
    stakes = StakeTable.genesis(per_node_T)
    vector_len = 2 ** cfg.n_qubits
    fed_bound = fedavg_bound(c)
    enc = encoding_time(vector_len, cfg.n_qubits, cfg.t_gate_s)
    expected_t = expected_block_time(stakes, per_node_T)
    total = total_time_bound(c, stakes, per_node_T, vector_len, cfg.n_qubits, cfg.t_gate_s)

    lines = [
        f"# constants: {_format_constants(c)}",
        f"# kappa={c.kappa!r} gamma={c.gamma!r}",
        f"fedavg_bound          {fed_bound:.17g}",
        f"encoding_time_s       {enc:.17g}  (L={vector_len}, n={cfg.n_qubits}, t_gate={cfg.t_gate_s!r})",
        f"expected_block_time_s {expected_t:.17g}",
        f"total_time_bound      {total:.17g}",
        "",
        f"{'T':>5}  {'fedavg_bound':>24}  {'total_time_bound':>24}",
    ]
    rounds = sorted(set(SWEEP_ROUNDS) | {c.T_rounds})
    for t, bound in bound_sweep(c, rounds):
        lines.append(f"{t:>5}  {bound:>24.17g}  {bound + expected_t + enc:>24.17g}")
    return lines


def cmd_bounds(cmd: Command) -> int:
    cfg = config_from_command(cmd)
    lines = bounds_report(cfg)
    logger.info(f"BOUNDS: Evaluated bound calculators for {cfg.run_name}.")
    print("\n".join(lines))
    return 0
