"""Payer and merchant sides of the microcheck scheme.

A check guarantor credential authorizes a payer key to write checks up
to a per-check limit until an expiry date. A microcheck is a credential
signed by the payer, payable to one merchant, pinning the exact amount,
currency, nonce, and date. The merchant decides whether to deliver by
running the compliance check over its policy, the guarantor credential,
the offer, and the check, all against one shared action attribute set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .credentials import (
    ActionAttributeSet,
    CAnd,
    Compare,
    Credential,
    KeyLeaf,
    build_credential,
    check_compliance,
    sign_credential,
)
from .keys import POLICY, KeyPair, PublicKeyId
from .money import Money, is_date, parse_amount
from .offers import APP_DOMAIN, Offer


class StaleNonce(Exception):
    """Payer-local reuse guard: every check must carry a fresh nonce."""


@dataclass(frozen=True)
class GuarantorView:
    guarantor_key: str
    payer_key: str
    per_check_limit: Money
    currency: str
    expiry: str
    credential: Credential


@dataclass(frozen=True)
class MicrocheckView:
    payer_key: str
    merchant_key: str
    amount: Money
    currency: str
    nonce: str
    date: str
    credential: Credential


def issue_guarantor_credential(
    guarantor: KeyPair,
    payer_key: PublicKeyId,
    limit: Money,
    expiry: str,
    now: str | None = None,
    app_domain: str = APP_DOMAIN,
) -> Credential:
    """Signed credential admitting any amount up to the limit before expiry.

    The strict `&amount <` bound is the limit plus one minor unit, so the
    limit itself is payable.
    """
    if limit.cents <= 0:
        raise ValueError("per-check limit must be positive")
    if not is_date(expiry):
        raise ValueError(f"expiry must be YYYYMMDD, got {expiry!r}")
    if now is not None and expiry <= now:
        raise ValueError(f"expiry {expiry} is not in the future of {now}")
    bound = Money(limit.cents + 1, limit.currency)
    cred = build_credential(
        guarantor.public_id,
        f'"{payer_key}"',
        f'app_domain == "{app_domain}" && currency == "{limit.currency}" '
        f"&& &amount < {bound.as_decimal_str()} "
        f'&& date < "{expiry}" -> "true";',
    )
    return sign_credential(cred, guarantor)


def _pins(cred: Credential) -> dict[str, str]:
    if not cred.clauses:
        return {}
    out: dict[str, str] = {}
    for clause in cred.clauses:
        if clause.result != "true":
            continue
        comps = (
            [clause.test]
            if isinstance(clause.test, Compare)
            else list(clause.test.children) if isinstance(clause.test, CAnd) else []
        )
        for c in comps:
            if isinstance(c, Compare) and c.op == "==" and not c.numeric:
                out[c.attr] = c.literal.text
        break
    return out


def open_guarantor(cred: Credential) -> GuarantorView:
    """Derive the structured guarantor fields from the credential."""
    if not isinstance(cred.licensees, KeyLeaf):
        raise ValueError("guarantor credential must license a single payer key")
    pins = _pins(cred)
    limit_cents = None
    expiry = None
    if cred.clauses:
        clause = cred.clauses[0]
        comps = (
            list(clause.test.children) if isinstance(clause.test, CAnd) else [clause.test]
        )
        for c in comps:
            if isinstance(c, Compare) and c.attr == "amount" and c.numeric and c.op == "<":
                from decimal import Decimal

                bound = Decimal(c.literal.text)
                limit_cents = int(bound * 100) - 1
            if isinstance(c, Compare) and c.attr == "date" and c.op == "<":
                expiry = c.literal.text
    if limit_cents is None or limit_cents <= 0 or expiry is None:
        raise ValueError("guarantor credential lacks amount/date bounds")
    currency = pins.get("currency", "USD")
    return GuarantorView(
        guarantor_key=cred.authorizer,
        payer_key=cred.licensees.key,
        per_check_limit=Money(limit_cents, currency),
        currency=currency,
        expiry=expiry,
        credential=cred,
    )


def open_microcheck(cred: Credential) -> MicrocheckView:
    """Derive the structured check fields; rejects checks without the
    full pin set."""
    if not isinstance(cred.licensees, KeyLeaf):
        raise ValueError("a check is payable to exactly one merchant key")
    pins = _pins(cred)
    for required in ("amount", "nonce", "date", "currency"):
        if required not in pins:
            raise ValueError(f"check does not pin {required!r}")
    if len(pins["nonce"]) < 12:
        raise ValueError("check nonce must be at least 12 hex characters")
    if not is_date(pins["date"]):
        raise ValueError("check date must be YYYYMMDD")
    amount = parse_amount(pins["amount"], pins["currency"])
    return MicrocheckView(
        payer_key=cred.authorizer,
        merchant_key=cred.licensees.key,
        amount=amount,
        currency=pins["currency"],
        nonce=pins["nonce"],
        date=pins["date"],
        credential=cred,
    )


@dataclass
class Wallet:
    """Payer-side checkbook: signs microchecks and guards nonce freshness."""

    pair: KeyPair
    guarantor_credential: Credential | None = None
    app_domain: str = APP_DOMAIN
    _used_nonces: set[str] = field(default_factory=set)

    def write_check(
        self,
        merchant_key: PublicKeyId | str,
        amount: Money,
        nonce: str,
        date: str,
    ) -> Credential:
        """Sign a check pinning (amount, currency, nonce, date).

        The nonce must be fresh for this payer; reuse is the only way to
        double-spend, so the wallet refuses it outright.
        """
        if len(nonce) < 12:
            raise ValueError("nonce must be at least 12 hex characters")
        if nonce in self._used_nonces:
            raise StaleNonce(f"nonce {nonce} already used by this payer")
        if not is_date(date):
            raise ValueError(f"date must be YYYYMMDD, got {date!r}")
        if amount.cents <= 0:
            raise ValueError("a check is for a positive amount")
        merchant = (
            merchant_key.canonical()
            if isinstance(merchant_key, PublicKeyId)
            else str(merchant_key)
        )
        cred = build_credential(
            self.pair.public_id,
            f'"{merchant}"',
            f'app_domain == "{self.app_domain}" && currency == "{amount.currency}" '
            f'&& amount == "{amount.as_decimal_str()}" && nonce == "{nonce}" '
            f'&& date == "{date}" -> "true";',
        )
        signed = sign_credential(cred, self.pair)
        self._used_nonces.add(nonce)
        return signed


def build_merchant_policy(
    merchant_key: PublicKeyId | str,
    trusted_guarantors: list[PublicKeyId | str],
    app_domain: str = APP_DOMAIN,
) -> Credential:
    """Local policy: any trusted guarantor jointly with the merchant key."""
    if not trusted_guarantors:
        raise ValueError("policy requires at least one trusted guarantor key")
    gs = [str(g) for g in trusted_guarantors]
    guarantor_part = f'"{gs[0]}"' if len(gs) == 1 else "(" + " || ".join(f'"{g}"' for g in gs) + ")"
    merchant = str(merchant_key)
    return build_credential(
        POLICY,
        f'{guarantor_part} && "{merchant}"',
        f'app_domain == "{app_domain}" -> "true";',
    )


def build_purchase_action(
    offer: Offer,
    purchased_mbps: int,
    amount: Money,
    nonce: str,
    date: str,
    app_domain: str = APP_DOMAIN,
) -> ActionAttributeSet:
    """The shared action for one link purchase: check pins plus the
    offer's own data pins echoed back, so every equality pin in the
    offer is satisfiable by construction and only the marketed bounds
    (amount floor, bandwidth bound, expiry) actually constrain."""
    attrs = {
        "app_domain": app_domain,
        "currency": amount.currency,
        "amount": amount.as_decimal_str(),
        "nonce": nonce,
        "date": date,
        "bandwidth": str(purchased_mbps),
        "link_name": offer.link_name,
        "min_price": offer.min_price.as_decimal_str(),
    }
    if offer.qos_class != "reserved":
        attrs["qos_class"] = offer.qos_class
    if offer.path_hint:
        attrs["path_hint"] = ",".join(offer.path_hint)
    return ActionAttributeSet(attrs)


def build_keepalive_action(
    amount: Money, nonce: str, date: str, app_domain: str = APP_DOMAIN
) -> ActionAttributeSet:
    """Action for a periodic keep-the-reservation-alive payment; carries
    no link attributes because no offer credential participates."""
    return ActionAttributeSet(
        {
            "app_domain": app_domain,
            "currency": amount.currency,
            "amount": amount.as_decimal_str(),
            "nonce": nonce,
            "date": date,
        }
    )


def verify_payment(
    merchant_policy: Credential,
    guarantor: Credential,
    offer: Credential,
    check: Credential,
    action: ActionAttributeSet,
) -> bool:
    """Merchant-side payment gate: true means deliver now, deposit later."""
    return check_compliance([merchant_policy], [guarantor, offer, check], (), action)


def verify_keepalive_payment(
    guarantor_policy: Credential,
    guarantor: Credential,
    check: Credential,
    merchant_key: PublicKeyId | str,
    action: ActionAttributeSet,
) -> bool:
    """Keepalive gate: no offer participates, so the redeeming merchant
    is the requester and the policy licenses the guarantor alone."""
    return check_compliance(
        [guarantor_policy], [guarantor, check], {str(merchant_key)}, action
    )


def build_keepalive_policy(
    trusted_guarantors: list[PublicKeyId | str], app_domain: str = APP_DOMAIN
) -> Credential:
    gs = [str(g) for g in trusted_guarantors]
    if not gs:
        raise ValueError("policy requires at least one trusted guarantor key")
    body = f'"{gs[0]}"' if len(gs) == 1 else " || ".join(f'"{g}"' for g in gs)
    return build_credential(
        POLICY, body, f'app_domain == "{app_domain}" -> "true";'
    )
