"""Topic names and subscription filters.

Topics are slash-separated paths of non-empty literal segments. Filters
reuse the layout and add two wildcards borrowed from MQTT practice:
``+`` matches exactly one segment, and a trailing ``#`` matches the
remaining segments, including none, so ``fleet/#`` matches ``fleet``
itself as well as everything below it.
"""

from __future__ import annotations

from .errors import TopicError


def validate_topic(topic: str) -> None:
    """Reject anything that is not a concrete, publishable topic."""
    if not isinstance(topic, str) or not topic:
        raise TopicError(f"topic must be a non-empty string, got {topic!r}")
    for segment in topic.split("/"):
        if not segment:
            raise TopicError(f"topic has an empty segment: {topic!r}")
        if "+" in segment or "#" in segment:
            raise TopicError(f"wildcards are not allowed in topics: {topic!r}")


def validate_pattern(pattern: str) -> None:
    """Reject malformed subscription filters."""
    if not isinstance(pattern, str) or not pattern:
        raise TopicError(f"pattern must be a non-empty string, got {pattern!r}")
    segments = pattern.split("/")
    for i, segment in enumerate(segments):
        if not segment:
            raise TopicError(f"pattern has an empty segment: {pattern!r}")
        if segment == "#":
            if i != len(segments) - 1:
                raise TopicError(f"'#' is only allowed as the final segment: {pattern!r}")
        elif "#" in segment:
            raise TopicError(f"'#' must stand alone in its segment: {pattern!r}")
        elif segment != "+" and "+" in segment:
            raise TopicError(f"'+' must stand alone in its segment: {pattern!r}")


def topic_matches(pattern: str, topic: str) -> bool:
    """True if a subscription filter matches a concrete topic.

    Both arguments are validated; routing correctness should fail loudly
    rather than silently drop traffic on a typo.
    """
    validate_pattern(pattern)
    validate_topic(topic)
    p_segs = pattern.split("/")
    t_segs = topic.split("/")
    for i, seg in enumerate(p_segs):
        if seg == "#":
            return True
        if i >= len(t_segs):
            return False
        if seg != "+" and seg != t_segs[i]:
            return False
    return len(t_segs) == len(p_segs)
