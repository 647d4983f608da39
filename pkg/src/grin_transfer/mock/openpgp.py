"""Minimal OpenPGP symmetric encryption (RFC 4880) for fixture packages.

Emits a SKESK v4 packet (AES-256, iterated+salted S2K over SHA-256) followed
by a SEIPD v1 packet carrying a binary literal-data packet and an MDC. Salt
and the random prefix come from the caller's RNG, so the same seed yields
byte-identical ciphertext. Any OpenPGP implementation (gpg included) can
decrypt the output with the passphrase.
"""

from __future__ import annotations

import hashlib
import random
import struct

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

try:
    from cryptography.hazmat.decrepit.ciphers.modes import CFB
except ImportError:  # cryptography < 43
    from cryptography.hazmat.primitives.ciphers.modes import CFB

AES256 = 9
SHA256 = 8
S2K_ITERATED_SALTED = 3
# coded count 0x60 -> 65536 octets hashed; small enough for fast fixtures
DEFAULT_S2K_COUNT = 0x60


def _decode_count(coded: int) -> int:
    return (16 + (coded & 15)) << ((coded >> 4) + 6)


def _new_header(tag: int, length: int) -> bytes:
    # new-format packet header with a five-octet length
    return bytes([0xC0 | tag, 0xFF]) + struct.pack(">I", length)


def derive_key(passphrase: bytes, salt: bytes, coded_count: int = DEFAULT_S2K_COUNT) -> bytes:
    count = _decode_count(coded_count)
    data = salt + passphrase
    count = max(count, len(data))
    reps, rem = divmod(count, len(data))
    h = hashlib.sha256()
    h.update(data * reps + data[:rem])
    return h.digest()


def encrypt(
    plaintext: bytes,
    passphrase: str,
    rng: random.Random,
    *,
    filename: bytes = b"",
    coded_count: int = DEFAULT_S2K_COUNT,
) -> bytes:
    pw = passphrase.encode("utf-8")
    salt = rng.randbytes(8)
    key = derive_key(pw, salt, coded_count)

    skesk_body = bytes([4, AES256, S2K_ITERATED_SALTED, SHA256]) + salt + bytes([coded_count])
    skesk = _new_header(3, len(skesk_body)) + skesk_body

    literal_body = b"b" + bytes([len(filename)]) + filename + struct.pack(">I", 0) + plaintext
    literal = _new_header(11, len(literal_body)) + literal_body

    prefix = rng.randbytes(16)
    prefix += prefix[-2:]
    mdc_head = b"\xd3\x14"
    mdc = mdc_head + hashlib.sha1(prefix + literal + mdc_head).digest()

    encryptor = Cipher(algorithms.AES(key), CFB(b"\x00" * 16)).encryptor()
    body = encryptor.update(prefix + literal + mdc) + encryptor.finalize()
    seipd_body = b"\x01" + body
    return skesk + _new_header(18, len(seipd_body)) + seipd_body
