//! Command-line interface: order/mask inspection, synthetic data, training,
//! generation, benchmarking, and dependency analysis.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use par_gen::bench::bench;
use par_gen::decode::{generate, SamplerConfig};
use par_gen::entropy::{pairwise_entropy_map, parallel_entropy_diff, EntropyConfig, FeatureGrid};
use par_gen::grid::GridShape;
use par_gen::io::{load_checkpoint, load_tokens, save_checkpoint, save_tokens};
use par_gen::layout::{build_attention_mask_with, build_sequence_layout};
use par_gen::model::{init_model, ModelConfig};
use par_gen::order::{build_order_plan, build_raster_plan, step_count, Stage};
use par_gen::render::{write_heatmap, write_token_grid};
use par_gen::synthetic::{
    gen_synthetic_dataset, scalar_codebook, Orientation, SyntheticConfig, TextureSpec,
};
use par_gen::train::{TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "par", about = "Parallelized autoregressive generation over token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ShapeArgs {
    /// Grid shape as T,H,W (e.g. 1,24,24).
    #[arg(long, default_value = "1,12,12", value_parser = parse_shape)]
    shape: (usize, usize, usize),
    /// Regions per spatial axis; groups hold m*m tokens.
    #[arg(long, default_value_t = 2)]
    m: usize,
}

impl ShapeArgs {
    fn grid(&self) -> par_gen::Result<GridShape> {
        GridShape::new(self.shape.0, self.shape.1, self.shape.2, self.m)
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected T,H,W".into());
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.trim().parse().map_err(|e| format!("{e}"))?;
    }
    Ok((dims[0], dims[1], dims[2]))
}

#[derive(Subcommand)]
enum Command {
    /// Print the generation order, group schedule, and step count as CSV.
    OrderDump {
        #[command(flatten)]
        shape: ShapeArgs,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the attention mask (0/1 matrix) and the group partition as CSV.
    MaskDump {
        #[command(flatten)]
        shape: ShapeArgs,
        /// Output directory.
        #[arg(long, default_value = "mask-out")]
        out: PathBuf,
    },
    /// Generate a synthetic striped dataset and write a token file.
    Synth {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        /// Number of stripe classes.
        #[arg(long, default_value_t = 4)]
        labels: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Token file path; labels go to `<out>.labels.csv`.
        #[arg(long, default_value = "synth.ptok")]
        out: PathBuf,
    },
    /// Train a model on synthetic stripes and write a checkpoint.
    Train {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        labels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.parc")]
        ckpt: PathBuf,
    },
    /// Sample grids from a checkpoint; writes a token file and PPM images.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Class label to condition on.
        #[arg(long, default_value_t = 0)]
        label: u32,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        guidance_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// 0 disables top-k.
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        /// Output directory.
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Time generation at several parallelism levels (batch size 1).
    Bench {
        /// Grid shape as T,H,W.
        #[arg(long, default_value = "1,24,24", value_parser = parse_shape)]
        shape: (usize, usize, usize),
        /// Comma-separated region counts to compare.
        #[arg(long, default_value = "1,2,4")]
        m_list: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use a trained checkpoint instead of random weights.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        /// Also write the table to a CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Conditional-entropy maps: pairwise dependencies and the
    /// sequential-vs-parallel increase under distant and raster orders.
    Entropy {
        #[command(flatten)]
        shape: ShapeArgs,
        /// Analyze an existing token file (features are codebook values);
        /// otherwise a correlated synthetic field is generated.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Correlation length of the synthetic field.
        #[arg(long, default_value_t = 2.0)]
        corr_len: f64,
        /// Reference position (raster index) for the pairwise map.
        #[arg(long, default_value_t = 0)]
        ref_pos: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long, default_value = "entropy-out")]
        out: PathBuf,
    },
}

fn textures_for(labels: usize) -> Vec<TextureSpec> {
    (0..labels)
        .map(|i| TextureSpec {
            period: if i % 2 == 0 { 4.0 } else { 6.0 },
            orientation: if i / 2 % 2 == 0 {
                Orientation::Horizontal
            } else {
                Orientation::Vertical
            },
        })
        .collect()
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> par_gen::Result<()> {
    match cli.command {
        Command::OrderDump { shape, out } => {
            let grid = shape.grid()?;
            let plan = build_order_plan(grid)?;
            let mut csv = String::from("seq,t,y,x,step,stage\n");
            for (step, span) in plan.schedule.steps.iter().enumerate() {
                for seq in span.positions() {
                    let c = plan.perm[seq];
                    let stage = match span.stage {
                        Stage::Sequential => "sequential",
                        Stage::Parallel => "parallel",
                    };
                    csv.push_str(&format!("{seq},{},{},{},{step},{stage}\n", c.t, c.y, c.x));
                }
            }
            csv.push_str(&format!("# steps,{}\n", step_count(grid)));
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::MaskDump { shape, out } => {
            let grid = shape.grid()?;
            let plan = build_order_plan(grid)?;
            let layout = build_sequence_layout(&plan);
            let mask = build_attention_mask_with(&layout, Default::default());
            std::fs::create_dir_all(&out)?;
            let mut matrix = String::new();
            for q in 0..mask.size {
                let row: Vec<&str> = (0..mask.size)
                    .map(|k| if mask.visible(q, k) { "1" } else { "0" })
                    .collect();
                matrix.push_str(&row.join(","));
                matrix.push('\n');
            }
            std::fs::write(out.join("mask.csv"), matrix)?;
            let mut groups = String::from("slot,group,kind\n");
            for (slot, s) in layout.slots.iter().enumerate() {
                let kind = match s {
                    par_gen::layout::Slot::Label => "label".to_string(),
                    par_gen::layout::Slot::Token(i) => format!("token{i}"),
                    par_gen::layout::Slot::Transition(i) => format!("transition{i}"),
                };
                groups.push_str(&format!("{slot},{},{kind}\n", layout.group_of[slot]));
            }
            std::fs::write(out.join("groups.csv"), groups)?;
            println!(
                "wrote {} and {}",
                out.join("mask.csv").display(),
                out.join("groups.csv").display()
            );
        }
        Command::Synth { shape, vocab, labels, samples, seed, out } => {
            let grid = shape.grid()?;
            let cfg = SyntheticConfig {
                shape: grid,
                vocab,
                textures: textures_for(labels),
                ..SyntheticConfig::striped_default(seed)
            };
            let data = gen_synthetic_dataset(&cfg, samples)?;
            let refs: Vec<&[u32]> = data.grids.iter().map(|g| g.tokens.as_slice()).collect();
            save_tokens(&refs, vocab as u32, (grid.t, grid.h, grid.w), &out)?;
            let mut lab = String::from("index,label\n");
            for (i, g) in data.grids.iter().enumerate() {
                lab.push_str(&format!("{i},{}\n", g.label));
            }
            let lab_path = out.with_extension("labels.csv");
            std::fs::write(&lab_path, lab)?;
            println!(
                "wrote {samples} grids to {} (labels in {})",
                out.display(),
                lab_path.display()
            );
        }
        Command::Train {
            shape,
            vocab,
            labels,
            seed,
            steps,
            lr,
            batch,
            samples,
            layers,
            hidden,
            heads,
            ckpt,
        } => {
            let grid = shape.grid()?;
            let synth = SyntheticConfig {
                shape: grid,
                vocab,
                textures: textures_for(labels),
                ..SyntheticConfig::striped_default(seed)
            };
            let data = gen_synthetic_dataset(&synth, samples)?;
            let config = ModelConfig {
                layers,
                hidden,
                heads,
                vocab,
                labels,
                grid,
                max_slots: grid.token_count() + grid.group_size(),
                ..ModelConfig::desk_default()
            };
            let model = init_model(config, seed)?;
            let plan = build_order_plan(grid)?;
            let layout = build_sequence_layout(&plan);
            let tcfg = TrainConfig { lr, steps, batch_size: batch, seed, ..Default::default() };
            let mut trainer = Trainer::new(model, layout, tcfg)?;
            let losses = trainer.train(&data.grids)?;
            let stride = steps.div_ceil(10).max(1);
            for (i, chunk) in losses.chunks(stride).enumerate() {
                let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
                println!("step {:>5}  loss {mean:.4}", i * stride);
            }
            save_checkpoint(&trainer.model, &ckpt)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Generate { ckpt, label, count, seed, guidance_scale, temperature, top_k, out } => {
            let model = load_checkpoint(&ckpt)?;
            let grid = model.config.grid;
            let plan = build_order_plan(grid)?;
            let layout = build_sequence_layout(&plan);
            std::fs::create_dir_all(&out)?;
            let mut grids = Vec::with_capacity(count);
            for i in 0..count {
                let sampler = SamplerConfig {
                    temperature,
                    top_k,
                    guidance_scale,
                    seed: seed.wrapping_add(i as u64),
                };
                let g = generate(&model, &layout, label, &sampler)?;
                write_token_grid(
                    out.join(format!("sample_{i:03}.ppm")),
                    &g,
                    model.config.vocab,
                    16,
                )?;
                grids.push(g);
            }
            let refs: Vec<&[u32]> = grids.iter().map(|g| g.tokens.as_slice()).collect();
            save_tokens(
                &refs,
                model.config.vocab as u32,
                (grid.t, grid.h, grid.w),
                out.join("samples.ptok"),
            )?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Bench { shape, m_list, reps, seed, ckpt, layers, hidden, heads, vocab, out } => {
            let m_values: Vec<usize> = m_list
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| par_gen::Error::BadShape(format!("{e}"))))
                .collect::<par_gen::Result<_>>()?;
            let trained = match &ckpt {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let template = match &trained {
                Some(m) => m.config.clone(),
                None => {
                    ModelConfig { layers, hidden, heads, vocab, ..ModelConfig::desk_default() }
                }
            };
            let report = bench(&template, shape, &m_values, reps, seed, trained.as_ref())?;
            print!("{}", report.to_csv());
            if let Some(p) = out {
                std::fs::write(p, report.to_csv())?;
            }
        }
        Command::Entropy { shape, tokens, samples, corr_len, ref_pos, seed, out } => {
            let grid = shape.grid()?;
            let features = match &tokens {
                Some(path) => {
                    let tf = load_tokens(path)?;
                    if (tf.t, tf.h, tf.w) != (grid.t, grid.h, grid.w) {
                        return Err(par_gen::Error::BadShape(format!(
                            "token file is {}x{}x{}, --shape says {}x{}x{}",
                            tf.t, tf.h, tf.w, grid.t, grid.h, grid.w
                        )));
                    }
                    let codebook = scalar_codebook(tf.vocab as usize, 1.0);
                    let pos = tf.t * tf.h * tf.w;
                    let mut data = Vec::with_capacity(tf.grids.len() * pos);
                    for g in &tf.grids {
                        data.extend(g.iter().map(|&id| codebook[id as usize]));
                    }
                    FeatureGrid::new(tf.grids.len(), pos, 1, data)?
                }
                None => {
                    let cfg = SyntheticConfig::correlated_field(grid, corr_len, seed);
                    gen_synthetic_dataset(&cfg, samples)?.features
                }
            };
            std::fs::create_dir_all(&out)?;
            let ecfg = EntropyConfig::default();
            let map = pairwise_entropy_map(&features, ref_pos, &ecfg)?;
            let mut csv = String::from("position,t,y,x,entropy\n");
            for (i, v) in map.iter().enumerate() {
                let c = grid.unflat(i);
                csv.push_str(&format!("{i},{},{},{},{v:.6}\n", c.t, c.y, c.x));
            }
            std::fs::write(out.join("pairwise.csv"), csv)?;
            write_heatmap(out.join("pairwise.ppm"), &map, grid, 16)?;

            for (name, plan) in
                [("distant", build_order_plan(grid)?), ("raster", build_raster_plan(grid)?)]
            {
                let report = parallel_entropy_diff(&features, &plan, &ecfg)?;
                let mut csv = String::from("seq,t,y,x,stage,h_parallel,h_sequential,diff\n");
                for p in &report.positions {
                    let stage = match p.stage {
                        Stage::Sequential => "sequential",
                        Stage::Parallel => "parallel",
                    };
                    csv.push_str(&format!(
                        "{},{},{},{},{stage},{:.6},{:.6},{:.6}\n",
                        p.seq, p.coord.t, p.coord.y, p.coord.x, p.h_parallel, p.h_sequential, p.diff
                    ));
                }
                csv.push_str(&format!(
                    "# mean_parallel_diff,{:.6}\n",
                    report.mean_parallel_diff()
                ));
                std::fs::write(out.join(format!("diff_{name}.csv")), csv)?;
                write_heatmap(out.join(format!("diff_{name}.ppm")), &report.diff_map(), grid, 16)?;
                println!(
                    "{name}: mean parallel entropy increase {:.4}",
                    report.mean_parallel_diff()
                );
            }
            println!("analysis written to {}", out.display());
        }
    }
    Ok(())
}
