"""Adversarial mining strategies plugged into the simulation loop.

A strategy sees every mining success before the winner acts and may take
it over.  Nodes it does not touch behave as honest miners.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Optional

from ..core_model import (Hash256, Transaction, TransactionBlock, TxInput, TxKind,
                          TxOutput, Vote)
from .config import ConfigInvalid

if TYPE_CHECKING:
    from .node import Node
    from .sim import Simulation


class Strategy:
    kind = "honest"

    def __init__(self, cfg: dict, sim: "Simulation"):
        self.cfg = cfg
        self.sim = sim

    def setup(self, sim: "Simulation") -> None:
        pass

    def on_mine(self, node: "Node", now: float) -> bool:
        """Return True when the strategy handled this success itself."""
        return False

    def answers_samples(self, node: "Node", h: Hash256) -> bool:
        return True

    def on_tick(self, sim: "Simulation", t: float) -> None:
        pass

    def tainted(self) -> set[Hash256]:
        """Blocks whose confirmation by an honest node counts as a safety failure."""
        return set()

    def stats(self) -> dict:
        return {}


def _parents_on(node: "Node", shard: int, tip: Hash256):
    """The node's parent sets with its own-shard entries replaced by ``tip``."""
    _, _, glob = node.mc.parent_sets()
    own = (tip,)
    glob = tuple((s, h) for s, h in glob if s != shard) + ((shard, tip),)
    glob = tuple(sorted(glob, key=lambda x: x[0]))
    return tip, own, glob


def _filler_body(sim: "Simulation") -> TransactionBlock:
    n = sim.dm.txs_per_block if sim.scenario.workload.saturate else 0
    return TransactionBlock((), (), (), n)


class PrivateMining(Strategy):
    """Withhold a fork from point F and release it once it overtakes a
    public block that honest nodes already hold at confirmation depth."""

    kind = "private_mining"

    def __init__(self, cfg: dict, sim: "Simulation"):
        super().__init__(cfg, sim)
        self.shard = int(cfg.get("target_shard", 0) or 0)
        self.t_start = float(cfg.get("t_start", 0.0))
        self.give_up = int(cfg.get("give_up", 10))
        self.repeat = bool(cfg.get("repeat", True))
        self.leader: Optional["Node"] = None
        self.fork: Optional[Hash256] = None
        self.fork_height = 0
        self.private: list[tuple] = []
        self.released = 0
        self.abandoned = 0
        self.active = True

    def setup(self, sim: "Simulation") -> None:
        bad = [n for n in sim.nodes if not n.honest and n.shard == self.shard]
        if not bad:
            raise ConfigInvalid("private mining needs an adversarial node in the target shard")
        self.leader = bad[0]

    def _public_height(self) -> int:
        ref = self.sim.nodes[self.sim.reference[self.shard]]
        return ref.mc.views[self.shard].tip_vheight

    def _start(self) -> None:
        ref = self.sim.nodes[self.sim.reference[self.shard]]
        v = ref.mc.views[self.shard]
        self.fork = v.tip_verified
        self.fork_height = v.tip_vheight
        self.private = []

    def on_mine(self, node: "Node", now: float) -> bool:
        if node.honest or not self.active or now < self.t_start:
            return False
        if self.fork is None:
            self._start()
        sim = self.sim
        lead = self.leader
        tip = self.private[-1][1] if self.private else self.fork
        vp, own, glob = _parents_on(lead, self.shard, tip)
        body = _filler_body(sim)
        h = sim.seal_and_publish(lead, vp, own, glob, body, [], now, publish=False)
        header = lead.mc.headers[h]
        self.private.append((now, h, header, body, lead.produced[h]))
        self._maybe_release(now)
        return True

    def _maybe_release(self, now: float) -> None:
        pub = self._public_height()
        mine = self.fork_height + len(self.private)
        # the fork point's public child is confirmed once kappa blocks follow it
        target_deep = pub >= self.fork_height + 1 + self.sim.scenario.kappa
        if self.private and target_deep and mine > pub:
            for _, h, header, body, coded in self.private:
                self.sim.publish(self.leader, h, header, body, coded, now)
            self.released += 1
            self._reset()
        elif pub - mine >= self.give_up:
            self.abandoned += 1
            self._reset()

    def _reset(self) -> None:
        self.fork = None
        self.private = []
        if not self.repeat:
            self.active = False

    def on_tick(self, sim: "Simulation", t: float) -> None:
        if self.fork is not None and self.active:
            self._maybe_release(t)

    def stats(self) -> dict:
        return {"releases": self.released, "abandoned": self.abandoned}


class Hpsa(Strategy):
    """Plant one block with an invalid transaction in a shard and keep
    building on it, hoping other shards accept it without validation."""

    kind = "hpsa"

    def __init__(self, cfg: dict, sim: "Simulation"):
        super().__init__(cfg, sim)
        self.t_attack = float(cfg.get("t_attack", 10.0))
        self.body_policy = cfg.get("body_policy", "in_shard")
        if self.body_policy not in ("in_shard", "withhold"):
            raise ConfigInvalid("hpsa body_policy must be in_shard or withhold")
        self.support = bool(cfg.get("support", True))
        self.shard: Optional[int] = None
        self.x: Optional[Hash256] = None
        self.x_time: Optional[float] = None
        self.branch: set[Hash256] = set()
        self.withheld: set[Hash256] = set()

    def setup(self, sim: "Simulation") -> None:
        bad = [n for n in sim.nodes if not n.honest]
        if not bad:
            raise ConfigInvalid("hpsa needs at least one adversarial node")
        self.shard = bad[0].shard

    def _bad_tx(self, node: "Node") -> Transaction:
        g = self.sim.generator
        payer = g.users[node.shard][0]
        u = g.genesis.draw(node.shard, payer, 10**6)
        return Transaction((TxInput(u.outpoint, payer, u.amount, node.shard, b"\x00" * 64),),
                           (TxOutput(u.amount, g.users[node.shard][1], node.shard),),
                           TxKind.DOMESTIC, memo=b"forged")

    def _best_branch_tip(self, node: "Node") -> Hash256:
        v = node.mc.views[self.shard]
        best, bh = self.x, v.blocks[self.x].height if self.x in v.blocks else 0
        for h in self.branch:
            e = v.blocks.get(h)
            if e is not None and e.height > bh:
                best, bh = h, e.height
        return best

    def on_mine(self, node: "Node", now: float) -> bool:
        if node.honest or node.shard != self.shard or now < self.t_attack:
            return False
        sim = self.sim
        if self.x is None:
            vp, own, glob = node.mc.parent_sets()
            tx = self._bad_tx(node)
            body = TransactionBlock((tx,), (Vote.ACCEPT,), (), max(0, _filler_body(sim).filler - 1))
            h = self._seal(node, vp, own, glob, body, now)
            self.x, self.x_time = h, now
            self.branch.add(h)
            return True
        if not self.support:
            return False
        tip = self._best_branch_tip(node)
        vp, own, glob = _parents_on(node, self.shard, tip)
        h = self._seal(node, vp, own, glob, _filler_body(sim), now)
        self.branch.add(h)
        return True

    def _seal(self, node, vp, own, glob, body, now) -> Hash256:
        sim = self.sim
        header, h, coded = sim.seal(node, vp, own, glob, body, now)
        node.own_blocks.add(h)
        node.produced[h] = coded
        node.ledger.register(h, header)
        node.mc.insert_block(header, body, now, inclusive=sim.inclusive[h], block_id=h)
        if self.body_policy == "withhold":
            self.withheld.add(h)
            body_to: list[int] = []
        else:
            body_to = [i for i in sim.members[node.shard] if i != node.id]
        sim.publish(node, h, header, body, coded, now, body_to=body_to)
        return h

    def answers_samples(self, node: "Node", h: Hash256) -> bool:
        return h not in self.withheld

    def tainted(self) -> set[Hash256]:
        return {self.x} if self.x is not None else set()

    def stats(self) -> dict:
        return {"invalid_block": self.x.hex() if self.x else None, "planted_at": self.x_time,
                "branch_blocks": len(self.branch)}


class CorruptionTransfer(Strategy):
    """Adaptive corruption moving between node sets at phase boundaries;
    corrupted miners publish headers but withhold bodies and samples."""

    kind = "corruption_transfer"

    def __init__(self, cfg: dict, sim: "Simulation"):
        super().__init__(cfg, sim)
        self.phase_length = float(cfg.get("phase_length", 0.0))
        self.phases = sorted(cfg.get("phases", []), key=lambda p: p["start"])
        if self.phase_length <= 0 or not self.phases:
            raise ConfigInvalid("corruption_transfer needs phase_length > 0 and phases")
        for p in self.phases:
            q = p["start"] / self.phase_length
            if abs(q - round(q)) > 1e-9:
                raise ConfigInvalid(f"phase start {p['start']} is not aligned to {self.phase_length}")
        self.withheld: set[Hash256] = set()

    def corrupted_at(self, t: float) -> set[int]:
        cur: set[int] = set()
        for p in self.phases:
            if p["start"] <= t:
                cur = {int(i) for i in p["nodes"]}
        return cur

    def on_mine(self, node: "Node", now: float) -> bool:
        if node.id not in self.corrupted_at(now):
            return False
        sim = self.sim
        node.refresh_all()
        vp, own, glob = node.mc.parent_sets()
        body = _filler_body(sim)
        header, h, coded = sim.seal(node, vp, own, glob, body, now)
        node.own_blocks.add(h)
        node.produced[h] = coded
        node.ledger.register(h, header)
        node.mc.insert_block(header, body, now, inclusive=sim.inclusive[h], block_id=h)
        self.withheld.add(h)
        sim.publish(node, h, header, body, coded, now, body_to=[])
        return True

    def answers_samples(self, node: "Node", h: Hash256) -> bool:
        return h not in self.withheld

    def stats(self) -> dict:
        return {"withheld_blocks": len(self.withheld)}


def make_strategy(cfg: dict, sim: "Simulation") -> Strategy:
    kind = cfg.get("kind", "honest")
    cls = {"honest": Strategy, "private_mining": PrivateMining, "hpsa": Hpsa,
           "corruption_transfer": CorruptionTransfer}.get(kind)
    if cls is None:
        raise ConfigInvalid(f"unknown adversary {kind!r}")
    return cls(cfg, sim)
