//! Every example runs to completion.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));

            #[test]
            fn runs() {
                run_example();
            }
        }
    };
}

example!(synth_corpus);
example!(train_eval);
example!(gradient_check);
example!(ablation);
example!(in_sweep);
example!(retrieval_metrics);
