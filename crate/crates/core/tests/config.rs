use swin_mae::config::RunConfig;
use swin_mae::masking::MaskMode;
use swin_mae::model::EncoderVariant;

#[test]
fn file_text_and_overrides() {
    let mut c = RunConfig::default();
    c.apply_text("# comment\nencoder_variant = I\nmask_mode = random  # trailing\npretrain.epochs = 7\n\nseed=3\n")
        .unwrap();
    assert_eq!(c.model.encoder_variant, EncoderVariant::I);
    assert_eq!(c.model.mask_mode, MaskMode::Random);
    assert_eq!(c.pretrain.epochs, 7);
    assert_eq!(c.seed, 3);
    c.set("finetune.lr", "0.002").unwrap();
    assert_eq!(c.finetune.lr, 0.002);
}

#[test]
fn resolved_values_reproduce_the_config() {
    let mut c = RunConfig::default();
    c.set("depths", "1,1").unwrap();
    c.set("heads", "2,4").unwrap();
    c.set("out_dir", "/tmp/x").unwrap();
    let mut d = RunConfig::default();
    for (k, v) in c.resolved() {
        if !v.is_empty() {
            d.set(&k, &v).unwrap();
        }
    }
    assert_eq!(c.resolved(), d.resolved());
}

#[test]
fn errors_name_the_line_or_key() {
    let mut c = RunConfig::default();
    let e = c.apply_text("seed = 1\nbogus = 2\n").unwrap_err();
    assert_eq!(e.kind(), "config");
    assert!(e.to_string().contains("line 2"));
    assert!(c.set("pretrain.epochs", "many").is_err());
    assert!(c.set("parallel", "maybe").is_err());
    assert!(c.apply_text("no equals sign").is_err());
}
