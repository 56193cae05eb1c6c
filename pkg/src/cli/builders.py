import numpy as np

from experiments.scenarios import OperatorScenario, TdScenario
from markov.chain import FiniteChain, random_ergodic_chain
from mdp.model import PolicySpec, TabularMdp, random_ergodic_mdp
from skm.operators import AffineMarkovOperator, IdentityOperator, ScaledOperator


def build_chain(config):
    section = config['chain']
    generate = section.get('generate')
    if generate:
        return random_ergodic_chain(generate['n_states'], generate['seed'], generate.get('mixing', 0.1))
    return FiniteChain.from_matrix(section['transitions'])


def build_mdp(config):
    section = config['mdp']
    generate = section.get('generate')
    if generate:
        return random_ergodic_mdp(
            generate['n_states'], generate['n_actions'], generate['seed'], generate.get('mixing', 0.1)
        )
    return TabularMdp(r=section['rewards'], p=section['transitions'], p0=section.get('initial'))


def build_policy(config, mdp):
    section = config['policy']
    if section['kind'] == 'deterministic':
        return PolicySpec.deterministic(section['actions'], mdp.n_actions)
    if section['kind'] == 'table':
        return PolicySpec(section['table'])
    return PolicySpec.uniform(mdp)


def build_scenario(config):
    """TD scenario from the mdp/policy sections, or a generic operator driven by the chain section"""
    kind = config['run']['scenario']
    if kind == 'td':
        mdp = build_mdp(config)
        return TdScenario(mdp, build_policy(config, mdp), check_compact_form=config['run']['check_compact_form'])

    chain = build_chain(config)
    operator = config['run']['operator']
    dimension = operator['dimension']
    if kind == 'scaled':
        op = ScaledOperator(dimension, chain.n_states, operator['factor'])
        x0 = np.ones(dimension)
    elif kind == 'identity':
        op = IdentityOperator(dimension, chain.n_states)
        x0 = np.ones(dimension)
    else:
        rng = np.random.default_rng(operator['seed'])
        op = AffineMarkovOperator.random(dimension, chain.n_states, rng, operator['contraction'])
        x0 = None
    return OperatorScenario(op, chain, x0=x0)
