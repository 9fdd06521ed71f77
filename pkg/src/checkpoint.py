# src/checkpoint.py
"""RGVF network checkpoints and the actor-critic manifest."""
import json
import logging
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from src import numgrad as ng
from src.errors import ConfigurationError
from src.rl import ActorCritic, InputScaling

logger = logging.getLogger(__name__)

MAGIC = b'RGVF'
VERSION = 1
ACTOR_FILE = 'actor.rgvf'
CRITIC_FILE = 'critic.rgvf'
MANIFEST_FILE = 'manifest.json'


def encode_mlp(params: ng.MlpParams, seed: int = 0, config_digest: str = '') -> bytes:
    """Magic, version byte, u32 LE metadata length, JSON metadata, then LE float64 parameters."""
    metadata = {
        'layer_sizes': list(params.layer_sizes),
        'hidden_activation': params.hidden_activation,
        'output_activation': params.output_activation,
        'seed': int(seed),
        'config_digest': config_digest,
    }
    meta = json.dumps(metadata, sort_keys=True, separators=(',', ':')).encode('utf-8')
    body = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for a in params.arrays())
    return MAGIC + bytes([VERSION]) + struct.pack('<I', len(meta)) + meta + body


def decode_mlp(blob: bytes) -> Tuple[ng.MlpParams, Dict]:
    if blob[:4] != MAGIC:
        raise ConfigurationError("Not an RGVF checkpoint (bad magic)")
    if len(blob) < 9 or blob[4] != VERSION:
        raise ConfigurationError(f"Unsupported RGVF version {blob[4] if len(blob) > 4 else None}")
    (meta_len,) = struct.unpack('<I', blob[5:9])
    try:
        metadata = json.loads(blob[9:9 + meta_len].decode('utf-8'))
        sizes = [int(s) for s in metadata['layer_sizes']]
    except (ValueError, KeyError) as e:
        raise ConfigurationError(f"Corrupt RGVF metadata: {e}") from e

    body = np.frombuffer(blob[9 + meta_len:], dtype='<f8')
    expected = sum(n_out * n_in + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))
    if body.size != expected:
        raise ConfigurationError(f"RGVF body holds {body.size} values, layer sizes need {expected}")

    weights, biases, offset = [], [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(body[offset:offset + n_out * n_in].reshape(n_out, n_in).astype(np.float64))
        offset += n_out * n_in
        biases.append(body[offset:offset + n_out].astype(np.float64))
        offset += n_out
    params = ng.MlpParams(tuple(sizes), weights, biases,
                          metadata.get('hidden_activation', 'tanh'), metadata.get('output_activation', 'identity'))
    return params, metadata


def save_mlp(path: str, params: ng.MlpParams, seed: int = 0, config_digest: str = ''):
    with open(path, 'wb') as file:
        file.write(encode_mlp(params, seed, config_digest))


def load_mlp(path: str) -> Tuple[ng.MlpParams, Dict]:
    if not os.path.exists(path):
        raise ConfigurationError(f"Checkpoint file not found: {path}")
    with open(path, 'rb') as file:
        return decode_mlp(file.read())


def save_actor_critic(directory: str, ac: ActorCritic, seed: int, config_digest: str,
                      env_kind: str, extra: Optional[Dict] = None) -> str:
    """Write actor, critic and manifest into ``directory``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    save_mlp(os.path.join(directory, ACTOR_FILE), ac.actor, seed, config_digest)
    save_mlp(os.path.join(directory, CRITIC_FILE), ac.critic, seed + 1, config_digest)
    manifest = {
        'format_version': VERSION,
        'files': {'actor': ACTOR_FILE, 'critic': CRITIC_FILE},
        'scaling': ac.scaling.to_dict(),
        'gamma': ac.gamma,
        'tau': ac.tau,
        'noise_fraction': ac.noise_fraction,
        'seed': int(seed),
        'config_digest': config_digest,
        'env_kind': env_kind,
        'state_dim': ac.state_dim,
        'action_dim': ac.action_dim,
        'goal_dim': len(ac.scaling.goal_indices),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, MANIFEST_FILE)
    with open(path, 'w') as file:
        json.dump(manifest, file, indent=4, sort_keys=True)
        file.write('\n')
    logger.info(f"Checkpoint written to {directory}")
    return path


def load_actor_critic(directory: str, env=None) -> Tuple[ActorCritic, Dict]:
    """Rebuild the agent (targets copied from the online nets) and check it against ``env``."""
    path = os.path.join(directory, MANIFEST_FILE)
    if not os.path.exists(path):
        raise ConfigurationError(f"No checkpoint manifest in {directory}")
    with open(path) as file:
        manifest = json.load(file)
    if manifest.get('format_version') != VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {manifest.get('format_version')}")

    actor, _ = load_mlp(os.path.join(directory, manifest['files']['actor']))
    critic, _ = load_mlp(os.path.join(directory, manifest['files']['critic']))
    scaling = InputScaling.from_dict(manifest['scaling'])
    if actor.layer_sizes[0] != scaling.feature_dim or critic.layer_sizes[0] != scaling.feature_dim + actor.layer_sizes[-1]:
        raise ConfigurationError("Checkpoint networks disagree with the stored input scaling")

    if env is not None:
        if (manifest['state_dim'], manifest['action_dim']) != (env.state_dim, env.action_dim) \
                or tuple(scaling.goal_indices) != tuple(env.goal_indices):
            raise ConfigurationError(
                f"Checkpoint for a {manifest['state_dim']}-state/{manifest['action_dim']}-action "
                f"'{manifest['env_kind']}' environment cannot drive '{env.name}' "
                f"({env.state_dim} states, {env.action_dim} actions)")
    ac = ActorCritic.from_networks(actor, critic, scaling, gamma=manifest['gamma'], tau=manifest['tau'],
                                   noise_fraction=manifest['noise_fraction'])
    return ac, manifest
