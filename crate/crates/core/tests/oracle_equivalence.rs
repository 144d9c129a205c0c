mod common;

#[test]
fn masked_blocks_equal_gather_for_every_mask() {
    for seed in [3, 17] {
        common::check_masked_equals_gather(seed, 8).unwrap();
    }
}

#[test]
fn kept_outputs_ignore_dropped_token_contents() {
    for seed in 0..6 {
        common::check_dropped_tokens_are_inert(seed).unwrap();
    }
}
