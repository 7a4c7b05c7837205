#[path = "support/gradcheck.rs"]
mod gradcheck;

use dfcvae::extractor::FeatureExtractor;
use gradcheck::check;

#[test]
fn gradients_match_finite_differences_with_conv_extractor() {
    let start = std::time::Instant::now();
    let g = check(&FeatureExtractor::random([3, 3, 4], 11), 1);
    assert!(g.passed(), "{g:?}");
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn gradients_match_finite_differences_with_identity_extractor() {
    let g = check(&FeatureExtractor::identity(), 2);
    assert!(g.passed(), "{g:?}");
}
