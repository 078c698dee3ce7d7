//! Scratch probe: prints attack numbers at the small test scale.

mod common;

use common::Lab;
use trojanforge::victim::make_baseline_patch;
use trojanforge::victim::BaselineTriggerSpec;
use trojanforge::numerics::RngSeed;

#[test]
#[ignore]
fn probe_small_scale_attack() {
    let lab = Lab::new(42);
    let patch = lab.optimize_patch(7);
    let delta = lab.search_text_trigger();
    println!("text trigger: {delta:?}");

    let badnet = make_baseline_patch(
        &BaselineTriggerSpec::StaticPatch {
            height: 8,
            width: 8,
            row: 4,
            col: 4,
        },
        (common::IMG_H, common::IMG_W, common::IMG_C),
        RngSeed::new(55),
    )
    .unwrap();

    let unpoisoned = lab.run_unpoisoned(Some(&patch), Some(&delta));
    println!("unpoisoned w/ triggers: {unpoisoned:?}");
    let img_only = lab.run_attack(Some(&patch), None);
    println!("optimized image only:   {img_only:?}");
    let full = lab.run_attack(Some(&patch), Some(&delta));
    println!("optimized image+text:   {full:?}");
    let text_only = lab.run_attack(None, Some(&delta));
    println!("text only:              {text_only:?}");
    let bad = lab.run_attack(Some(&badnet), None);
    println!("badnet image only:      {bad:?}");

    // Surrogate-optimized trigger applied to the target encoder.
    let sur_labels = lab
        .family
        .label_encoder_for(&lab.family.surrogate_visuals[0])
        .unwrap();
    let cfg = trojanforge::trigger_image::ImageTriggerOptConfig {
        alpha_w: 1.0,
        beta_w: 1.0,
        lr: 0.05,
        iterations: 120,
        batch_size: 8,
        seed: RngSeed::new(7),
    };
    let (sur_patch, _) = trojanforge::trigger_image::optimize_image_trigger(
        &lab.family.surrogate_visuals[0],
        &sur_labels,
        &lab.pool,
        &common::patch_geometry(),
        &cfg,
    )
    .unwrap();
    let sur_only = lab.run_attack(Some(&sur_patch), None);
    println!("surrogate image only:   {sur_only:?}");
    let sur_text = lab.run_attack(Some(&sur_patch), Some(&delta));
    println!("surrogate image+text:   {sur_text:?}");
}
