"""Simulated ISP network elements: the challenge/response spot
reservation protocol, inter-ISP boundary hand-off, futures booking and
activation, capacity admission, and reservation lifetime management.

Every NE is an independent state machine owning the capacity of its
outgoing directed links. Signature and compliance work is delegated to a
policy decision point (PDP); the NE itself only does bookkeeping. Time
is an injected simulation instant (epoch seconds), never the wall clock.

Capacity rule: for every link and every instant, the sum of active
reservations plus committed future bookings overlapping that instant
never exceeds capacity. Futures are charged at booking time, which is
the only reading under which activation of a committed booking can be
made infallible.

Known gap: when a multi-provider purchase fails at a later provider, the
earlier providers' capacity is released via teardown but their already
accepted checks stay queued; the money side of a partial establishment
is left to the dispute mechanism.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .credentials import (
    BadSignature,
    Credential,
    UnverifiedCredential,
    build_credential,
    canonical_bytes,
    sign_credential,
    verify_signature,
)
from .keys import KeyPair, PublicKeyId, scheme_for_key
from .money import Money, date_of_instant, text_of_instant, instant_from_text
from .offers import (
    APP_DOMAIN,
    MalformedOffer,
    Offer,
    QOS_PREMIUM,
    derive_offer_fields,
    validate_unbundling,
)
from .payments import (
    build_keepalive_action,
    build_keepalive_policy,
    build_merchant_policy,
    build_purchase_action,
    open_microcheck,
    verify_keepalive_payment,
    verify_payment,
)
from .settlement import TransactionRecord

DEFAULT_CHALLENGE_TTL = 60  # sim-seconds


class ExpiredChallenge(Exception):
    pass


class ReplayedChallenge(Exception):
    pass


class PaymentRefused(Exception):
    pass


class CapacityExhausted(Exception):
    pass


class UnbundlingProhibited(Exception):
    pass


class UnknownReservation(Exception):
    pass


class OutsideInterval(Exception):
    pass


# ---------------------------------------------------------------------------
# Wire-level objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Challenge:
    challenge_id: str  # 16 random bytes, hex
    ne_id: str
    issued_at: int
    ttl_seconds: int = DEFAULT_CHALLENGE_TTL


@dataclass(frozen=True)
class ReservationRequest:
    """Signed response to a challenge: offers along the remaining path,
    the customer's guarantor credential, and one check per offer of the
    provider being addressed."""

    challenge_id: str
    offers: tuple[Credential, ...]
    guarantor: Credential
    checks: tuple[Credential, ...]
    bandwidth_mbps: int
    customer_key: str
    signature: bytes


def request_message(
    challenge_id: str,
    offers: tuple[Credential, ...],
    guarantor: Credential,
    checks: tuple[Credential, ...],
    bandwidth_mbps: int,
) -> bytes:
    parts = [challenge_id.encode("ascii")]
    for cred in (*offers, guarantor, *checks):
        parts.append(canonical_bytes(cred))
    parts.append(str(bandwidth_mbps).encode("ascii"))
    return b"\x00".join(parts)


def sign_reservation_request(
    customer: KeyPair,
    challenge_id: str,
    offers: tuple[Credential, ...],
    guarantor: Credential,
    checks: tuple[Credential, ...],
    bandwidth_mbps: int,
) -> ReservationRequest:
    message = request_message(challenge_id, offers, guarantor, checks, bandwidth_mbps)
    return ReservationRequest(
        challenge_id=challenge_id,
        offers=tuple(offers),
        guarantor=guarantor,
        checks=tuple(checks),
        bandwidth_mbps=bandwidth_mbps,
        customer_key=customer.public_id.canonical(),
        signature=customer.sign(message),
    )


def _request_signature_valid(req: ReservationRequest) -> bool:
    try:
        key = PublicKeyId.from_text(req.customer_key)
        scheme = scheme_for_key(key)
    except Exception:
        return False
    message = request_message(
        req.challenge_id, req.offers, req.guarantor, req.checks, req.bandwidth_mbps
    )
    return scheme.verify(key, message, req.signature)


# ---------------------------------------------------------------------------
# Reservations
# ---------------------------------------------------------------------------

NOTIONAL = "notional"
ACTIVE = "active"
EXPIRED = "expired"
LAPSED = "lapsed"


@dataclass
class Reservation:
    reservation_id: str
    state: str
    isp_key: str
    segments: tuple[tuple[str, str, str], ...]  # (from_ne, to_ne, link_name)
    bandwidth_mbps: int
    start: int
    end: int
    customer_key: str
    qos_class: str = "reserved"
    next_payment_due: int | None = None
    offer_credential: Credential | None = None
    guarantor_credential: Credential | None = None

    @property
    def link_names(self) -> tuple[str, ...]:
        return tuple(name for _, _, name in self.segments)


@dataclass(frozen=True)
class BoundaryReferral:
    """Local outcome plus where the customer must negotiate next."""

    outcome: object  # Reservation (spot) or reservation Credential (futures)
    at_location: str
    next_isp_key: str
    next_ne_id: str
    remaining_offers: tuple[Credential, ...]


def make_reservation_credential(
    isp: KeyPair, res: Reservation, app_domain: str = APP_DOMAIN
) -> Credential:
    """Signed commitment redeemable alone at activation time; expires
    with the reserved period."""
    conditions = (
        f'app_domain == "{app_domain}" '
        f'&& reservation_id == "{res.reservation_id}" '
        f'&& link_names == "{",".join(res.link_names)}" '
        f"&& &bandwidth == {res.bandwidth_mbps} "
        f'&& starts == "{text_of_instant(res.start)}" '
        f'&& ends == "{text_of_instant(res.end)}" -> "true";'
    )
    cred = build_credential(isp.public_id, f'"{res.customer_key}"', conditions)
    return sign_credential(cred, isp)


def open_reservation_credential(cred: Credential) -> dict:
    """Pinned reservation fields, or raise BadSignature / ValueError."""
    if not verify_signature(cred):
        raise BadSignature("reservation credential failed signature verification")
    from .payments import _pins

    pins = _pins(cred)
    for required in ("reservation_id", "link_names", "starts", "ends"):
        if required not in pins:
            raise ValueError(f"reservation credential lacks {required!r}")
    return {
        "reservation_id": pins["reservation_id"],
        "link_names": tuple(pins["link_names"].split(",")),
        "start": instant_from_text(pins["starts"]),
        "end": instant_from_text(pins["ends"]),
        "isp_key": cred.authorizer,
    }


# ---------------------------------------------------------------------------
# Policy decision point
# ---------------------------------------------------------------------------

@dataclass
class Pdp:
    """Verification service the NEs defer to; never touches NE state.
    NEs do no signature work themselves: challenge responses, purchase
    credentials, and reservation credentials all verify here."""

    trusted_guarantors: list[str]
    app_domain: str = APP_DOMAIN

    def verify_request(self, req: ReservationRequest) -> bool:
        return _request_signature_valid(req)

    def open_reservation(self, cred: Credential) -> dict:
        return open_reservation_credential(cred)

    def check_purchase(
        self,
        isp_key: str,
        offer_cred: Credential,
        guarantor: Credential,
        check_cred: Credential,
        bandwidth_mbps: int,
        date: str,
    ) -> tuple[Offer, object]:
        """Full admission check for one (offer, check) pair. Raises
        PaymentRefused or UnbundlingProhibited; returns derived views."""
        if not verify_signature(offer_cred):
            raise PaymentRefused("offer credential failed signature verification")
        try:
            offer = derive_offer_fields(offer_cred)
        except MalformedOffer as exc:
            raise PaymentRefused(f"malformed offer: {exc}") from exc
        if offer.isp_key != isp_key:
            raise PaymentRefused("offer was issued by a different provider")
        try:
            check = open_microcheck(check_cred)
        except ValueError as exc:
            raise PaymentRefused(f"malformed check: {exc}") from exc
        if check.merchant_key != isp_key:
            raise PaymentRefused("check is payable to a different provider")
        if not validate_unbundling(offer, bandwidth_mbps):
            raise UnbundlingProhibited(
                f"offer sells {offer.bandwidth_mbps}Mbps whole; {bandwidth_mbps} refused"
            )
        floor = offer.prorated_price(bandwidth_mbps)
        if check.amount.cents < floor.cents:
            raise PaymentRefused(
                f"check {check.amount} underpays pro-rated price {floor}"
            )
        action = build_purchase_action(
            offer, bandwidth_mbps, check.amount, check.nonce, date, self.app_domain
        )
        policy = build_merchant_policy(isp_key, self.trusted_guarantors, self.app_domain)
        try:
            ok = verify_payment(policy, guarantor, offer_cred, check_cred, action)
        except UnverifiedCredential as exc:
            raise PaymentRefused(str(exc)) from exc
        if not ok:
            raise PaymentRefused("compliance check refused the payment")
        return offer, check

    def check_keepalive(
        self,
        isp_key: str,
        guarantor: Credential,
        check_cred: Credential,
        price: Money,
        date: str,
    ):
        try:
            check = open_microcheck(check_cred)
        except ValueError as exc:
            raise PaymentRefused(f"malformed check: {exc}") from exc
        if check.merchant_key != isp_key:
            raise PaymentRefused("check is payable to a different provider")
        if check.amount.cents < price.cents or check.currency != price.currency:
            raise PaymentRefused(f"keepalive requires {price}, got {check.amount}")
        action = build_keepalive_action(check.amount, check.nonce, date, self.app_domain)
        policy = build_keepalive_policy(self.trusted_guarantors, self.app_domain)
        try:
            ok = verify_keepalive_payment(policy, guarantor, check_cred, isp_key, action)
        except UnverifiedCredential as exc:
            raise PaymentRefused(str(exc)) from exc
        if not ok:
            raise PaymentRefused("compliance check refused the keepalive")
        return check, action


# ---------------------------------------------------------------------------
# Network elements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Link:
    neighbor: str
    link_name: str
    capacity_mbps: int


@dataclass
class NetworkElement:
    ne_id: str
    isp_name: str
    isp: KeyPair
    location: str
    pdp: Pdp
    fabric: "Fabric"
    rng: random.Random
    keepalive_period: int | None = None
    keepalive_price: Money | None = None
    links: dict[str, Link] = field(default_factory=dict)
    active_rows: dict[str, dict[str, Reservation]] = field(default_factory=dict)
    calendar: dict[str, dict[str, tuple[int, int, int]]] = field(default_factory=dict)
    bookings: dict[str, Reservation] = field(default_factory=dict)
    active_load: dict[str, int] = field(default_factory=dict)
    challenges: dict[str, Challenge] = field(default_factory=dict)
    used_challenges: set[str] = field(default_factory=set)
    outbox: list[TransactionRecord] = field(default_factory=list)

    @property
    def isp_key(self) -> str:
        return self.isp.public_id.canonical()

    def add_link(self, neighbor: str, link_name: str, capacity_mbps: int) -> None:
        self.links[neighbor] = Link(neighbor, link_name, capacity_mbps)
        self.active_rows.setdefault(neighbor, {})
        self.calendar.setdefault(neighbor, {})
        self.active_load.setdefault(neighbor, 0)

    # -- challenges ---------------------------------------------------------

    def issue_challenge(self, now: int, ttl_seconds: int = DEFAULT_CHALLENGE_TTL) -> Challenge:
        """Fresh unpredictable single-use challenge."""
        challenge = Challenge(
            challenge_id=f"{self.rng.getrandbits(128):032x}",
            ne_id=self.ne_id,
            issued_at=now,
            ttl_seconds=ttl_seconds,
        )
        self.challenges[challenge.challenge_id] = challenge
        return challenge

    def _consume_challenge(self, challenge_id: str, now: int) -> None:
        if challenge_id in self.used_challenges:
            raise ReplayedChallenge(f"challenge {challenge_id[:8]} already redeemed")
        challenge = self.challenges.get(challenge_id)
        if challenge is None:
            raise ExpiredChallenge(f"challenge {challenge_id[:8]} unknown at {self.ne_id}")
        if now > challenge.issued_at + challenge.ttl_seconds:
            raise ExpiredChallenge(f"challenge {challenge_id[:8]} past its ttl")
        # Single use: one complete verification attempt, accept or refuse.
        self.used_challenges.add(challenge_id)
        del self.challenges[challenge_id]

    # -- capacity accounting --------------------------------------------------

    def _window_load(self, neighbor: str, start: int, end: int) -> int:
        """Worst-case committed load on the link over [start, end)."""
        rows = [
            (r.start, r.end, r.bandwidth_mbps)
            for r in self.active_rows[neighbor].values()
            if r.qos_class != QOS_PREMIUM
        ]
        rows += list(self.calendar[neighbor].values())
        overlapping = [(s, e, m) for s, e, m in rows if s < end and e > start]
        points = {start} | {s for s, _, _ in overlapping if start <= s < end}
        worst = 0
        for t in points:
            load = sum(m for s, e, m in overlapping if s <= t < e)
            worst = max(worst, load)
        return worst

    def _can_carry(self, neighbor: str, mbps: int, start: int, end: int) -> bool:
        link = self.links.get(neighbor)
        if link is None:
            return False
        return self._window_load(neighbor, start, end) + mbps <= link.capacity_mbps

    def _charge_active(self, neighbor: str, res: Reservation) -> None:
        self.active_rows[neighbor][res.reservation_id] = res
        if res.qos_class != QOS_PREMIUM:
            self.active_load[neighbor] += res.bandwidth_mbps

    def _release_active(self, neighbor: str, res: Reservation) -> None:
        if self.active_rows[neighbor].pop(res.reservation_id, None) is not None:
            if res.qos_class != QOS_PREMIUM:
                self.active_load[neighbor] -= res.bandwidth_mbps

    def free_capacity(self, neighbor: str) -> int:
        link = self.links[neighbor]
        return link.capacity_mbps - self.active_load[neighbor]

    # -- spot protocol --------------------------------------------------------

    def handle_spot_request(
        self, req: ReservationRequest, now: int
    ) -> Reservation | BoundaryReferral:
        """Verify the challenge response, admit this provider's segments,
        and either finish (whole path inside this provider) or refer the
        customer to the next provider's ingress."""
        self._consume_challenge(req.challenge_id, now)
        if not self.pdp.verify_request(req):
            raise PaymentRefused("request signature does not verify")

        run, remaining = self._own_run(req.offers)
        if len(req.checks) != len(run):
            raise PaymentRefused(
                f"expected one check per local offer ({len(run)}), got {len(req.checks)}"
            )
        date = date_of_instant(now)
        verified: list[tuple[Offer, object, Credential, Credential]] = []
        for offer_cred, check_cred in zip(run, req.checks):
            offer, check = self.pdp.check_purchase(
                self.isp_key, offer_cred, req.guarantor, check_cred,
                req.bandwidth_mbps, date,
            )
            verified.append((offer, check, offer_cred, check_cred))
        if verified[0][0].link_from != self.location:
            raise PaymentRefused(
                f"path starts at {verified[0][0].link_from}, not at this ingress"
            )
        self._require_chained(verified)

        segments: list[tuple[str, str, str]] = []
        end = None
        premium = all(o.qos_class == QOS_PREMIUM for o, _, _, _ in verified)
        for offer, _, _, _ in verified:
            segments.extend(self.fabric.route(self.isp_name, offer))
            expiry_instant = instant_from_text(offer.valid_until)
            end = expiry_instant if end is None else min(end, expiry_instant)

        res = Reservation(
            reservation_id=f"res-{self.rng.getrandbits(64):016x}",
            state=ACTIVE,
            isp_key=self.isp_key,
            segments=tuple(segments),
            bandwidth_mbps=req.bandwidth_mbps,
            start=now,
            end=end,
            customer_key=req.customer_key,
            qos_class=QOS_PREMIUM if premium else "reserved",
            next_payment_due=(now + self.keepalive_period) if self.keepalive_period else None,
            offer_credential=verified[0][2],
            guarantor_credential=req.guarantor,
        )
        self.propagate_path(res)
        self.fabric.register(res)

        for offer, check, offer_cred, check_cred in verified:
            action = build_purchase_action(
                offer, req.bandwidth_mbps, check.amount, check.nonce, date,
                self.pdp.app_domain,
            )
            self.outbox.append(
                TransactionRecord(
                    offer=offer_cred,
                    microcheck=check_cred,
                    guarantor=req.guarantor,
                    action=action,
                    merchant_key=self.isp_key,
                    received_at=date,
                )
            )

        if remaining:
            at = derive_offer_fields(remaining[0]).link_from
            next_isp, next_ne = self.fabric.ingress(remaining[0].authorizer, at)
            return BoundaryReferral(res, at, next_isp, next_ne, remaining)
        return res

    def _own_run(
        self, offers: tuple[Credential, ...]
    ) -> tuple[tuple[Credential, ...], tuple[Credential, ...]]:
        if not offers:
            raise PaymentRefused("request carries no offers")
        i = 0
        while i < len(offers) and offers[i].authorizer == self.isp_key:
            i += 1
        if i == 0:
            raise PaymentRefused("no offers for this provider at the head of the path")
        return offers[:i], offers[i:]

    @staticmethod
    def _require_chained(verified: list) -> None:
        for (a, *_), (b, *_) in zip(verified, verified[1:]):
            if a.link_to != b.link_from:
                raise PaymentRefused(
                    f"offers do not chain: {a.link_name} then {b.link_name}"
                )

    def propagate_path(self, res: Reservation) -> bool:
        """Record the reservation on every segment NE, or none of them:
        a failure at any interior NE rolls the earlier charges back."""
        charged: list[tuple[NetworkElement, str]] = []
        for from_ne, to_ne, _name in res.segments:
            ne = self.fabric.ne(from_ne)
            if res.qos_class != QOS_PREMIUM and not ne._can_carry(
                to_ne, res.bandwidth_mbps, res.start, res.end
            ):
                for peer, neighbor in charged:
                    peer._release_active(neighbor, res)
                raise CapacityExhausted(
                    f"link {from_ne}->{to_ne} cannot carry {res.bandwidth_mbps}Mbps"
                )
            ne._charge_active(to_ne, res)
            charged.append((ne, to_ne))
        return True

    # -- futures ----------------------------------------------------------------

    def book_future(
        self, req: ReservationRequest, interval: tuple[int, int], now: int
    ) -> Credential | BoundaryReferral:
        """Commit capacity for a future interval without installing any
        path; the returned signed credential alone redeems the booking."""
        start, end = interval
        if start <= now:
            raise OutsideInterval("booking interval must start in the future")
        if end <= start:
            raise OutsideInterval("booking interval is empty")
        self._consume_challenge(req.challenge_id, now)
        if not self.pdp.verify_request(req):
            raise PaymentRefused("request signature does not verify")

        run, remaining = self._own_run(req.offers)
        if len(req.checks) != len(run):
            raise PaymentRefused(
                f"expected one check per local offer ({len(run)}), got {len(req.checks)}"
            )
        date = date_of_instant(now)
        verified = []
        for offer_cred, check_cred in zip(run, req.checks):
            offer, check = self.pdp.check_purchase(
                self.isp_key, offer_cred, req.guarantor, check_cred,
                req.bandwidth_mbps, date,
            )
            verified.append((offer, check, offer_cred, check_cred))
        if verified[0][0].link_from != self.location:
            raise PaymentRefused(
                f"path starts at {verified[0][0].link_from}, not at this ingress"
            )
        self._require_chained(verified)

        segments: list[tuple[str, str, str]] = []
        for offer, _, _, _ in verified:
            segments.extend(self.fabric.route(self.isp_name, offer))

        res = Reservation(
            reservation_id=f"res-{self.rng.getrandbits(64):016x}",
            state=NOTIONAL,
            isp_key=self.isp_key,
            segments=tuple(segments),
            bandwidth_mbps=req.bandwidth_mbps,
            start=start,
            end=end,
            customer_key=req.customer_key,
            offer_credential=verified[0][2],
            guarantor_credential=req.guarantor,
        )
        self._commit_booking(res)
        self.fabric.register(res)

        for offer, check, offer_cred, check_cred in verified:
            action = build_purchase_action(
                offer, req.bandwidth_mbps, check.amount, check.nonce, date,
                self.pdp.app_domain,
            )
            self.outbox.append(
                TransactionRecord(
                    offer=offer_cred,
                    microcheck=check_cred,
                    guarantor=req.guarantor,
                    action=action,
                    merchant_key=self.isp_key,
                    received_at=date,
                )
            )

        credential = make_reservation_credential(self.isp, res, self.pdp.app_domain)
        if remaining:
            at = derive_offer_fields(remaining[0]).link_from
            next_isp, next_ne = self.fabric.ingress(remaining[0].authorizer, at)
            return BoundaryReferral(credential, at, next_isp, next_ne, remaining)
        return credential

    def _commit_booking(self, res: Reservation) -> None:
        committed: list[tuple[NetworkElement, str]] = []
        for from_ne, to_ne, _name in res.segments:
            ne = self.fabric.ne(from_ne)
            if not ne._can_carry(to_ne, res.bandwidth_mbps, res.start, res.end):
                for peer, neighbor in committed:
                    peer.calendar[neighbor].pop(res.reservation_id, None)
                    peer.bookings.pop(res.reservation_id, None)
                raise CapacityExhausted(
                    f"future interval oversubscribed on {from_ne}->{to_ne}"
                )
            ne.calendar[to_ne][res.reservation_id] = (res.start, res.end, res.bandwidth_mbps)
            ne.bookings[res.reservation_id] = res
            committed.append((ne, to_ne))

    def activate_reservation(self, cred: Credential, now: int) -> Reservation:
        """Install the booked path. A committed booking activates
        unconditionally: its capacity was charged when it was booked."""
        fields = self.pdp.open_reservation(cred)  # BadSignature on tamper
        res = self.bookings.get(fields["reservation_id"])
        if res is None or fields["isp_key"] != self.isp_key:
            raise UnknownReservation(fields["reservation_id"])
        if not fields["start"] <= now < fields["end"]:
            raise OutsideInterval(
                f"activation at {now} outside [{res.start}, {res.end})"
            )
        if res.state == ACTIVE:
            return res
        res.state = ACTIVE
        if self.keepalive_period:
            res.next_payment_due = now + self.keepalive_period
        for from_ne, to_ne, _name in res.segments:
            ne = self.fabric.ne(from_ne)
            ne.calendar[to_ne].pop(res.reservation_id, None)
            ne.bookings.pop(res.reservation_id, None)
            ne._charge_active(to_ne, res)
        return res

    # -- keepalive and expiry -----------------------------------------------

    def keepalive_payment(self, reservation_id: str, check: Credential, now: int) -> int:
        """A verified periodic check pushes the payment due date out one
        period and queues the record for deposit."""
        res = self._find_active(reservation_id)
        if res is None:
            raise UnknownReservation(reservation_id)
        if res.next_payment_due is None or self.keepalive_price is None:
            raise PaymentRefused("reservation is not payment-metered")
        if res.guarantor_credential is None:
            raise PaymentRefused("no guarantor credential on file")
        date = date_of_instant(now)
        view, action = self.pdp.check_keepalive(
            self.isp_key, res.guarantor_credential, check, self.keepalive_price, date
        )
        res.next_payment_due += self.keepalive_period
        self.outbox.append(
            TransactionRecord(
                offer=res.offer_credential,
                microcheck=check,
                guarantor=res.guarantor_credential,
                action=action,
                merchant_key=self.isp_key,
                received_at=date,
            )
        )
        return res.next_payment_due

    def _find_active(self, reservation_id: str) -> Reservation | None:
        for rows in self.active_rows.values():
            if reservation_id in rows:
                return rows[reservation_id]
        found = self.fabric.reservations.get(reservation_id)
        if found is not None and found.state == ACTIVE and found.isp_key == self.isp_key:
            return found
        return None

    def expire_reservations(self, now: int) -> int:
        """Transition reservations past their interval end to expired and
        payment-lapsed ones to lapsed, releasing capacity; returns the
        count of transitions performed by this call."""
        count = 0
        seen: set[str] = set()
        for rows in list(self.active_rows.values()):
            for res in list(rows.values()):
                if res.reservation_id in seen or res.state != ACTIVE:
                    continue
                seen.add(res.reservation_id)
                if res.end <= now:
                    self._teardown(res, EXPIRED)
                    count += 1
                elif res.next_payment_due is not None and res.next_payment_due <= now:
                    self._teardown(res, LAPSED)
                    count += 1
        for neighbor, entries in self.calendar.items():
            for res_id, (s, e, _m) in list(entries.items()):
                if e <= now:
                    del entries[res_id]
                    self.bookings.pop(res_id, None)
        return count

    def _teardown(self, res: Reservation, new_state: str) -> None:
        for from_ne, to_ne, _name in res.segments:
            self.fabric.ne(from_ne)._release_active(to_ne, res)
        res.state = new_state

    def teardown(self, reservation_id: str, customer_key: str) -> bool:
        """Customer-requested release (partial-establishment rollback)."""
        res = self.fabric.reservations.get(reservation_id)
        if res is None or res.customer_key != customer_key or res.isp_key != self.isp_key:
            raise UnknownReservation(reservation_id)
        if res.state == ACTIVE:
            self._teardown(res, EXPIRED)
            return True
        if res.state == NOTIONAL:
            for from_ne, to_ne, _name in res.segments:
                ne = self.fabric.ne(from_ne)
                ne.calendar[to_ne].pop(res.reservation_id, None)
                ne.bookings.pop(res.reservation_id, None)
            res.state = EXPIRED
            return True
        return False


# ---------------------------------------------------------------------------
# Fabric: topology, routing, registry
# ---------------------------------------------------------------------------

class TopologyError(Exception):
    pass


@dataclass(frozen=True)
class TopologySpec:
    nes: tuple[tuple[str, str, str], ...]  # (isp_name, ne_id, location)
    links: tuple[tuple[str, str, str, int], ...]  # (ne_a, ne_b, link_name, capacity)


def parse_topology(text: str) -> TopologySpec:
    """Textual table: `ne <isp> <ne_id> <location>` and
    `link <ne_a> <ne_b> <link_name> <capacity_mbps>` lines."""
    nes: list[tuple[str, str, str]] = []
    links: list[tuple[str, str, str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "ne" and len(parts) == 4:
            nes.append((parts[1], parts[2], parts[3]))
        elif parts[0] == "link" and len(parts) == 5:
            try:
                cap = int(parts[4])
            except ValueError:
                raise TopologyError(f"line {lineno}: capacity must be an integer")
            links.append((parts[1], parts[2], parts[3], cap))
        else:
            raise TopologyError(f"line {lineno}: unrecognized topology line {raw!r}")
    return TopologySpec(tuple(nes), tuple(links))


class Fabric:
    """All NEs of all providers plus the location directory. Each NE is
    its own state machine; the fabric only routes lookups between them."""

    def __init__(self, pdp: Pdp):
        self.pdp = pdp
        self.nes: dict[str, NetworkElement] = {}
        self.reservations: dict[str, Reservation] = {}
        self._isp_names: dict[str, str] = {}  # isp_key -> isp_name

    @classmethod
    def build(
        cls,
        spec: TopologySpec,
        isp_keys: dict[str, KeyPair],
        pdp: Pdp,
        rng_seed: int | None = None,
        keepalive: dict[str, tuple[int, Money]] | None = None,
    ) -> "Fabric":
        fabric = cls(pdp)
        keepalive = keepalive or {}
        for isp_name, ne_id, location in spec.nes:
            if isp_name not in isp_keys:
                raise TopologyError(f"topology names unknown provider {isp_name!r}")
            if ne_id in fabric.nes:
                raise TopologyError(f"duplicate ne id {ne_id!r}")
            if rng_seed is None:
                rng = random.SystemRandom()
            else:
                rng = random.Random(f"{rng_seed}:{ne_id}")
            period, price = keepalive.get(isp_name, (None, None))
            ne = NetworkElement(
                ne_id=ne_id,
                isp_name=isp_name,
                isp=isp_keys[isp_name],
                location=location,
                pdp=pdp,
                fabric=fabric,
                rng=rng,
                keepalive_period=period,
                keepalive_price=price,
            )
            fabric.nes[ne_id] = ne
            fabric._isp_names[ne.isp_key] = isp_name
        for ne_a, ne_b, link_name, capacity in spec.links:
            if ne_a not in fabric.nes or ne_b not in fabric.nes:
                raise TopologyError(f"link names unknown ne: {ne_a} or {ne_b}")
            fabric.nes[ne_a].add_link(ne_b, link_name, capacity)
            fabric.nes[ne_b].add_link(ne_a, link_name, capacity)
        return fabric

    def ne(self, ne_id: str) -> NetworkElement:
        if ne_id not in self.nes:
            raise TopologyError(f"unknown ne {ne_id!r}")
        return self.nes[ne_id]

    def register(self, res: Reservation) -> None:
        self.reservations[res.reservation_id] = res

    def ingress(self, isp_key: str, location: str) -> tuple[str, str]:
        """The named provider's NE at a location (directory lookup)."""
        for ne_id in sorted(self.nes):
            ne = self.nes[ne_id]
            if ne.isp_key == isp_key and ne.location == location:
                return isp_key, ne_id
        raise TopologyError(f"no ingress for provider at {location!r}")

    def ingress_at(self, location: str) -> list[tuple[str, str]]:
        out = []
        for ne_id in sorted(self.nes):
            ne = self.nes[ne_id]
            if ne.location == location:
                out.append((ne.isp_key, ne_id))
        return out

    def route(self, isp_name: str, offer: Offer) -> list[tuple[str, str, str]]:
        """Segments between the offer's endpoints inside one provider:
        the offer's pinned route when present, else hop-count shortest
        path over the provider's NE graph (deterministic by ne id)."""
        members = {
            ne_id: ne for ne_id, ne in self.nes.items() if ne.isp_name == isp_name
        }
        if offer.path_hint:
            hops = list(offer.path_hint)
            for a, b in zip(hops, hops[1:]):
                if a not in members or b not in members[a].links:
                    raise TopologyError(f"path hint {offer.path_hint} is not routable")
            if members[hops[0]].location != offer.link_from or (
                members[hops[-1]].location != offer.link_to
            ):
                raise TopologyError("path hint does not join the offer endpoints")
            return [
                (a, b, members[a].links[b].link_name) for a, b in zip(hops, hops[1:])
            ]
        sources = sorted(
            ne_id for ne_id, ne in members.items() if ne.location == offer.link_from
        )
        targets = {
            ne_id for ne_id, ne in members.items() if ne.location == offer.link_to
        }
        if not sources or not targets:
            raise TopologyError(
                f"provider {isp_name} does not reach {offer.link_from}-{offer.link_to}"
            )
        start = sources[0]
        parent: dict[str, str | None] = {start: None}
        queue = [start]
        found = None
        while queue:
            current = queue.pop(0)
            if current in targets:
                found = current
                break
            for neighbor in sorted(members[current].links):
                if neighbor in members and neighbor not in parent:
                    parent[neighbor] = current
                    queue.append(neighbor)
        if found is None:
            raise TopologyError(
                f"no internal route {offer.link_from}->{offer.link_to} in {isp_name}"
            )
        path = [found]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])
        path.reverse()
        return [
            (a, b, members[a].links[b].link_name) for a, b in zip(path, path[1:])
        ]

    def expire_all(self, now: int) -> int:
        return sum(self.nes[ne_id].expire_reservations(now) for ne_id in sorted(self.nes))

    def flush_records(self, isp_name: str | None = None) -> list[TransactionRecord]:
        """Drain queued transaction records, deterministically by ne id."""
        out: list[TransactionRecord] = []
        for ne_id in sorted(self.nes):
            ne = self.nes[ne_id]
            if isp_name is not None and ne.isp_name != isp_name:
                continue
            out.extend(ne.outbox)
            ne.outbox.clear()
        return out


def capacity_violations(fabric: Fabric) -> list[str]:
    """Full-state audit: recompute loads from the reservation tables and
    report any link/instant over capacity or any stale incremental
    counter. An empty list is a clean audit."""
    problems: list[str] = []
    for ne_id in sorted(fabric.nes):
        ne = fabric.nes[ne_id]
        for neighbor, link in ne.links.items():
            rows = [
                r for r in ne.active_rows[neighbor].values() if r.qos_class != QOS_PREMIUM
            ]
            recomputed = sum(r.bandwidth_mbps for r in rows)
            if recomputed != ne.active_load[neighbor]:
                problems.append(
                    f"{ne_id}->{neighbor}: counter {ne.active_load[neighbor]} "
                    f"!= recomputed {recomputed}"
                )
            intervals = [(r.start, r.end, r.bandwidth_mbps) for r in rows]
            intervals += list(ne.calendar[neighbor].values())
            for t in sorted({s for s, _, _ in intervals}):
                load = sum(m for s, e, m in intervals if s <= t < e)
                if load > link.capacity_mbps:
                    problems.append(
                        f"{ne_id}->{neighbor}: load {load} exceeds "
                        f"capacity {link.capacity_mbps} at {t}"
                    )
    return problems
