"""Global decode-operation counters.

The decode-free retrieval claim is enforced with these: the joint query
path must leave all of them untouched.
"""

ARITH_DECODE_CALLS = 0   # arith_decode invocations (2 per image: hyper + latent)
NEURAL_DECODES = 0       # decoder-network evaluations
IMAGES_DECODED = 0       # archive entries fully decompressed


def reset():
    global ARITH_DECODE_CALLS, NEURAL_DECODES, IMAGES_DECODED
    ARITH_DECODE_CALLS = 0
    NEURAL_DECODES = 0
    IMAGES_DECODED = 0


def snapshot():
    return {
        "arith_decode_calls": ARITH_DECODE_CALLS,
        "neural_decodes": NEURAL_DECODES,
        "images_decoded": IMAGES_DECODED,
    }


def total_decode_ops():
    return ARITH_DECODE_CALLS + NEURAL_DECODES + IMAGES_DECODED
