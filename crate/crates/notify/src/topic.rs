use labpipe_core::Subscription;

/// Dot-separated topic matching.
///
/// Segments compare literally, except that a final `*` segment matches one
/// or more trailing segments. A `*` anywhere else is an ordinary segment.
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    let pattern: Vec<&str> = pattern.split('.').collect();
    let topic: Vec<&str> = topic.split('.').collect();
    match pattern.split_last() {
        Some((&"*", prefix)) => topic.len() > prefix.len() && topic[..prefix.len()] == *prefix,
        _ => pattern == topic,
    }
}

pub fn match_subscriptions<'a>(topic: &str, subscriptions: &'a [Subscription]) -> Vec<&'a Subscription> {
    subscriptions
        .iter()
        .filter(|s| topic_matches(&s.topic, topic))
        .collect()
}
