"""The clearing house: a passive repository of offer credentials and a
path composer over them.

The store is a pure function of the posted credential set, so any number
of clearing-house instances fed the same postings serve identical
results. It never signs anything and holds no money. Writes are
serialized and replace an immutable snapshot, so concurrent readers
always observe a consistent store.
"""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass

from .credentials import Credential
from .money import Money
from .offers import Offer, open_offer, validate_unbundling


class Expired(Exception):
    """Offer posted at or after its validity bound."""


class NoPath(Exception):
    """No eligible offer sequence connects the requested endpoints."""


@dataclass(frozen=True)
class OfferQuery:
    link_from: str
    link_to: str
    min_bandwidth_mbps: int
    needed_on: str  # YYYYMMDD the capacity must be purchasable
    max_total_price: Money | None = None
    currency: str = "USD"

    def __post_init__(self) -> None:
        if self.min_bandwidth_mbps <= 0:
            raise ValueError("min_bandwidth_mbps must be positive")
        if self.max_total_price is not None:
            object.__setattr__(self, "currency", self.max_total_price.currency)


@dataclass(frozen=True)
class PathPlan:
    segments: tuple[tuple[Offer, int], ...]  # (offer, purchased_mbps) per hop
    total_price: Money

    def validate(self) -> "PathPlan":
        if not self.segments:
            raise ValueError("a path plan has at least one segment")
        purchased = {m for _, m in self.segments}
        if len(purchased) != 1:
            raise ValueError("purchased bandwidth must be constant along the plan")
        total = 0
        for (offer, mbps), nxt in zip(self.segments, self.segments[1:] + ((None, 0),)):
            if mbps > offer.bandwidth_mbps:
                raise ValueError("purchase exceeds offered bandwidth")
            if nxt[0] is not None and offer.link_to != nxt[0].link_from:
                raise ValueError("consecutive offers do not share an endpoint")
            if offer.min_price.currency != self.total_price.currency:
                raise ValueError("plan mixes currencies")
            total += offer.prorated_price(mbps).cents
        if total != self.total_price.cents:
            raise ValueError("total price does not match the segment sum")
        return self


class ClearingHouse:
    def __init__(self) -> None:
        self._offers: dict[str, Offer] = {}
        self._write_lock = threading.Lock()

    def post_offer(self, cred: Credential, now: str) -> Offer:
        """Verify, derive, and store an offer. Idempotent on identical
        credentials; raises BadSignature / MalformedOffer / Expired."""
        offer = open_offer(cred)
        if offer.valid_until <= now:
            raise Expired(f"offer expired {offer.valid_until}, posting at {now}")
        with self._write_lock:
            if offer.offer_id not in self._offers:
                store = dict(self._offers)
                store[offer.offer_id] = offer
                self._offers = store
        return offer

    def __len__(self) -> int:
        return len(self._offers)

    def get(self, offer_id: str) -> Offer | None:
        return self._offers.get(offer_id)

    def _eligible(self, offer: Offer, q: OfferQuery) -> bool:
        if offer.valid_until <= q.needed_on:
            return False
        if offer.min_price.currency != q.currency:
            return False
        if offer.bandwidth_mbps < q.min_bandwidth_mbps:
            return False
        return validate_unbundling(offer, q.min_bandwidth_mbps)

    def query_offers(self, q: OfferQuery) -> list[Offer]:
        """Unexpired offers on the queried link that can sell the
        requested bandwidth, cheapest first, ties by offer id."""
        snapshot = self._offers
        found = [
            o
            for o in snapshot.values()
            if o.link_from == q.link_from and o.link_to == q.link_to and self._eligible(o, q)
        ]
        found.sort(key=lambda o: (o.min_price.cents, o.offer_id))
        if q.max_total_price is not None:
            cap = q.max_total_price.cents
            found = [
                o for o in found
                if o.prorated_price(q.min_bandwidth_mbps).cents <= cap
            ]
        return found

    def expire_offers(self, now: str) -> int:
        """Drop offers whose validity bound has passed; returns the count."""
        with self._write_lock:
            keep = {oid: o for oid, o in self._offers.items() if not o.valid_until < now}
            removed = len(self._offers) - len(keep)
            self._offers = keep
        return removed

    def compose_path(self, q: OfferQuery) -> PathPlan:
        """Minimum-total-price plan over the offer graph (nodes are
        locations, edges are eligible offers), price ties broken by the
        lexicographic offer-id sequence. The purchased bandwidth is
        constant along the plan; feasibility is edge-local because
        bandwidth does not add up along a path. Raises NoPath when the
        endpoints cannot be connected (or only above max_total_price)."""
        if q.link_from == q.link_to:
            raise NoPath("degenerate query: identical endpoints")
        snapshot = self._offers
        edges: dict[str, list[tuple[int, str, Offer]]] = {}
        for offer in snapshot.values():
            if self._eligible(offer, q):
                price = offer.prorated_price(q.min_bandwidth_mbps).cents
                edges.setdefault(offer.link_from, []).append((price, offer.offer_id, offer))

        best: dict[str, tuple[int, tuple[str, ...]]] = {}
        heap: list[tuple[int, tuple[str, ...], str, tuple]] = [
            (0, (), q.link_from, ())
        ]
        while heap:
            price, ids, node, segs = heapq.heappop(heap)
            if node in best and best[node] <= (price, ids):
                continue
            best[node] = (price, ids)
            if node == q.link_to:
                plan = PathPlan(
                    segments=tuple((o, q.min_bandwidth_mbps) for o in segs),
                    total_price=Money(price, q.currency),
                ).validate()
                if q.max_total_price is not None and price > q.max_total_price.cents:
                    raise NoPath("cheapest plan exceeds the price cap")
                return plan
            for edge_price, oid, offer in edges.get(node, ()):  # noqa: B020
                nxt = offer.link_to
                cand = (price + edge_price, ids + (oid,))
                if nxt in best and best[nxt] <= cand:
                    continue
                heapq.heappush(heap, (cand[0], cand[1], nxt, segs + (offer,)))
        raise NoPath(f"no offer path from {q.link_from} to {q.link_to}")

    def export_offers(self) -> str:
        """Newline-separated credential blocks for replication."""
        snapshot = self._offers
        ordered = sorted(snapshot.values(), key=lambda o: o.offer_id)
        return "\n".join(o.credential.text() for o in ordered)

    def import_offers(self, text: str, now: str) -> int:
        from .credentials import parse_credential_blocks

        count = 0
        for cred in parse_credential_blocks(text):
            self.post_offer(cred, now)
            count += 1
        return count
