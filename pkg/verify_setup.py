#!/usr/bin/env python3
"""
xDiff Setup Verification
Checks modules, configuration and the gradients of every network before long experiments
"""

import importlib
import os
import sys

import numpy as np


def print_status(message, status="info"):
    colors = {
        "success": "\033[0;32m✅\033[0m",
        "warning": "\033[1;33m⚠️\033[0m",
        "error": "\033[0;31m❌\033[0m",
        "info": "\033[0;34mℹ️\033[0m"
    }
    print(f"{colors.get(status, colors['info'])} {message}")


def check_python_modules():
    """Check required Python modules"""
    print("\n📦 Python Module Check:")

    required_modules = ['numpy', 'pandas', 'matplotlib']
    core_modules = ['xdiff_core', 'xdiff_radio', 'xdiff_scheduler', 'xdiff_env', 'xdiff_nn',
                    'xdiff_diffusion', 'xdiff_agent', 'xdiff_baselines', 'xdiff_bandit', 'xdiff_plots']

    missing = []
    for module in required_modules + core_modules:
        try:
            importlib.import_module(module)
            print_status(f"{module}: Available", "success")
        except ImportError as e:
            print_status(f"{module}: Missing ({e})", "error")
            missing.append(module)

    if missing:
        print_status(f"Missing modules: {', '.join(missing)}", "warning")
        print("Install with: pip3 install -r requirements.txt")
    return len(missing) == 0


def check_configuration(config_path=None):
    """Resolve every preset, with the config file on top when one is given"""
    print("\n⚙️ Configuration Check:")
    from xdiff_core import PRESETS, XDiffError, load_config

    if config_path is None and os.path.exists("xdiff_config.json"):
        config_path = "xdiff_config.json"
    ok = True
    for preset in sorted(PRESETS):
        try:
            cfg = load_config(config_path, preset)
            net = cfg["network"]
            print_status(f"{preset}: {net['num_cells']} cells, UEs {net['ues_per_cell']}, "
                         f"E2 latency {cfg['env']['e2_latency_ms']} ms", "success")
        except XDiffError as e:
            print_status(f"{preset}: {e}", "error")
            ok = False
    return ok


def gradient_errors(seed=0):
    """Relative error of every analytic gradient against central differences (float64, small nets)"""
    from xdiff_agent import Critic, critic_loss
    from xdiff_baselines import actor_loss
    from xdiff_diffusion import EpsilonNet, diffusion_loss, make_schedule, q_guidance
    from xdiff_nn import gradient_check, mlp

    rng = np.random.default_rng(seed)
    state_dim, action_dim, batch = 5, 3, 4
    states = rng.standard_normal((batch, state_dim))
    actions = rng.uniform(-1, 1, (batch, action_dim))
    y = -rng.uniform(0, 1, batch)
    schedule = make_schedule(3)
    errors = {}

    net = mlp(4, 2, 8, 3, rng, dtype=np.float64)
    x = rng.standard_normal((batch, 4))

    def mlp_loss():
        return float(np.sum(net.forward(x)[0] ** 2))
    out, cache = net.forward(x)
    errors["mlp"] = gradient_check(mlp_loss, net.params(), net.backward(cache, 2 * out)[0])

    eps_net = EpsilonNet(action_dim, state_dim, rng, hidden=8, layers=4, emb_dim=4, dtype=np.float64)
    # non-zero last layer so every gradient path is exercised
    eps_net.mlp.weights[-1][...] = rng.normal(0, 0.3, eps_net.mlp.weights[-1].shape)

    def eps_loss():
        return diffusion_loss(eps_net, states, actions, schedule, np.random.default_rng(1))[0]
    errors["epsilon_net"] = gradient_check(eps_loss, eps_net.params(),
                                           diffusion_loss(eps_net, states, actions, schedule,
                                                          np.random.default_rng(1))[1])

    critic = Critic(state_dim, action_dim, rng, hidden=8, layers=4, dtype=np.float64)

    def c_loss():
        return critic_loss(states, actions, [critic], y)[0]
    errors["critic"] = gradient_check(c_loss, critic.params(), critic_loss(states, actions, [critic], y)[1][0])

    actor = mlp(state_dim, action_dim, 8, 4, rng, output_activation="tanh", dtype=np.float64)

    def a_loss():
        return actor_loss(actor, critic, states)[0]
    errors["ddpg_actor"] = gradient_check(a_loss, actor.params(), actor_loss(actor, critic, states)[1])

    def q_value():
        return q_guidance(eps_net, critic, states, actions, schedule, np.random.default_rng(2))[0]
    errors["q_guidance"] = gradient_check(q_value, eps_net.params(),
                                          q_guidance(eps_net, critic, states, actions, schedule,
                                                     np.random.default_rng(2))[1])
    return errors


def check_gradients():
    print("\n🧮 Gradient Check:")
    tolerances = {"q_guidance": 1e-3}
    ok = True
    for name, err in gradient_errors().items():
        tol = tolerances.get(name, 1e-4)
        if err <= tol:
            print_status(f"{name}: relative error {err:.2e}", "success")
        else:
            print_status(f"{name}: relative error {err:.2e} exceeds {tol:.0e}", "error")
            ok = False
    return ok


def run_checks(config_path=None):
    print("\n" + "=" * 50)
    print("📡 xDiff Setup Verification Report")
    print("=" * 50)

    modules_ok = check_python_modules()
    config_ok = modules_ok and check_configuration(config_path)
    gradients_ok = modules_ok and check_gradients()

    print("\n📊 Summary:")
    if modules_ok and config_ok and gradients_ok:
        print_status("xDiff setup: Ready to run experiments", "success")
        print("\n🚀 Next steps:")
        print("   1. Single run:  python3 xdiff_control.py run --preset lab --provider xdiff --seeds 1 --slots 300")
        print("   2. Compare:     python3 xdiff_control.py compare runs/lab_xdiff runs/lab_cira")
    else:
        print_status("xDiff setup: Needs attention", "warning")
        print("\n🔧 Fix issues above, then run verification again")
    print("\n💡 For help: Check README_xDiff.md")
    return modules_ok and config_ok and gradients_ok


if __name__ == "__main__":
    sys.exit(0 if run_checks(sys.argv[1] if len(sys.argv) > 1 else None) else 1)
