mod exit;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tessera_core::attack::{run_all, run_scenario, AttackVerdict, Scenario, Testbed, Variant};
use tessera_core::fabric::DEFAULT_SRAM_BASE;
use tessera_core::perf::{emit_tables, load_tile_schedule, model_tables, schedule_amplification, Granularity};
use tessera_core::pipeline::FillReport;
use tessera_core::preempt::{PreemptReport, TraceEvent};
use tessera_core::{
    generate_device_identity, inspect, pack, simulate_jitter, AppIdentity, DevicePublicKey, Enclave, Fabric,
    FabricLayout, IceRegisters, InferenceContext, JitterParams, PackOptions, PlatformProfile, SimStats, WeightImage,
};

#[derive(Parser)]
#[command(
    name = "tessera",
    version,
    about = "Inline crypto engine simulator for NPU weight streaming"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Platform profile: i9, xavier, orin or a JSON file.
    #[arg(long, default_value = "xavier")]
    profile: String,
    /// RNG seed. Without it, keys and nonces come from OS entropy.
    #[arg(long)]
    seed: Option<u64>,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a device identity keypair.
    Keygen {
        #[arg(long, default_value_t = 2048)]
        bits: usize,
        /// Directory for device.key (private, PKCS#8 DER) and device.pub (SPKI DER).
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Encrypt a flat weight file into a weight image.
    Pack {
        /// Plaintext weights.
        input: PathBuf,
        /// Device public key (SPKI DER).
        #[arg(long)]
        pubkey: PathBuf,
        /// Application certificate the key is bound to.
        #[arg(long)]
        cert: PathBuf,
        /// Physical load address; counters are derived from it.
        #[arg(long, default_value = "0x80000000", value_parser = parse_u64)]
        base: u64,
        #[arg(long)]
        out: PathBuf,
        /// Reuse one keystream for every line. Refused without --insecure-demo.
        #[arg(long)]
        fixed_counter: bool,
        #[arg(long)]
        insecure_demo: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Print the header of a weight image.
    Inspect {
        image: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the datapath or the jitter study.
    Simulate {
        #[command(subcommand)]
        what: Simulate,
    },
    /// Run an attack scenario against the defended system and its control.
    Attack {
        /// Scenario name or `all`.
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic tables: preemption latency, throughput, amplification, energy, area.
    Model {
        /// Restrict to one profile; all built-ins by default.
        #[arg(long)]
        profile: Option<String>,
        /// Write CSV and JSON tables into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tile schedule JSON for schedule-weighted amplification.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum Simulate {
    /// Provision the ICE from a weight image and stream it into SRAM.
    Stream {
        image: PathBuf,
        /// Device private key written by `keygen`.
        #[arg(long)]
        device_key: PathBuf,
        #[arg(long)]
        cert: PathBuf,
        #[arg(long, default_value_t = 1024)]
        tile_bytes: u64,
        /// Preempt after this many lines, then reprovision and finish.
        #[arg(long)]
        preempt_at: Option<u64>,
        /// Write the delivered plaintext here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the preemption trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo keystream and DRAM latency jitter.
    Jitter {
        #[arg(long, default_value_t = 100_000)]
        requests: u64,
        #[arg(long, default_value_t = 0.1)]
        sigma_ks: f64,
        #[arg(long, default_value_t = 0.2)]
        sigma_dram: f64,
        /// Run this many consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        sweep: u64,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|e| e.to_string())
}

fn rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn fingerprint(der: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(der)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(unix)]
fn restrict(path: &Path) -> Result<()> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))?;
    Ok(())
}

#[cfg(not(unix))]
fn restrict(_: &Path) -> Result<()> {
    Ok(())
}

fn keygen(bits: usize, out: &Path, seed: Option<u64>, json: bool) -> Result<()> {
    let id = generate_device_identity(bits, &mut rng(seed))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let key_path = out.join("device.key");
    let pub_path = out.join("device.pub");
    write(&key_path, &id.enclave.to_efuse_bytes()?)?;
    restrict(&key_path)?;
    let der = id.public.to_der()?;
    write(&pub_path, &der)?;
    let fp = fingerprint(&der);
    if json {
        print_json(&serde_json::json!({
            "bits": bits,
            "private_key": key_path,
            "public_key": pub_path,
            "fingerprint": fp,
        }))
    } else {
        println!("wrote {} and {}", key_path.display(), pub_path.display());
        println!("RSA-{bits} device key, fingerprint {fp}");
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn pack_cmd(
    input: &Path,
    pubkey: &Path,
    cert: &Path,
    base: u64,
    out: &Path,
    fixed_counter: bool,
    insecure_demo: bool,
    seed: Option<u64>,
    json: bool,
) -> Result<()> {
    let plain = read(input)?;
    let pk = DevicePublicKey::from_der(&read(pubkey)?)?;
    let app = AppIdentity::new(read(cert)?);
    let opts = PackOptions {
        base_addr: base,
        fixed_counter,
        insecure_demo,
    };
    let image = pack(&plain, &pk, &app, opts, &mut rng(seed))?;
    image.write_to(out)?;
    if fixed_counter {
        eprintln!(
            "warning: {} uses a fixed counter and leaks plaintext by XOR",
            out.display()
        );
    }
    report_header(&image.to_bytes(), json)
}

fn report_header(bytes: &[u8], json: bool) -> Result<()> {
    let r = inspect(bytes)?;
    if json {
        return print_json(&r);
    }
    let h = &r.header;
    println!("version          {}", h.version);
    println!(
        "flags            {:#06x}{}",
        h.flags,
        if r.fixed_counter {
            " (fixed counter, INSECURE)"
        } else {
            ""
        }
    );
    println!("base_addr        {:#x}", h.base_addr);
    println!("plaintext_len    {}", h.plaintext_len);
    println!(
        "h_app            {}",
        h.h_app.iter().map(|b| format!("{b:02x}")).collect::<String>()
    );
    println!("blob             {} bytes, RSA-{}", h.blob_len, r.rsa_bits);
    println!(
        "ciphertext       {} lines at offset {}",
        r.ciphertext_lines, r.ciphertext_offset
    );
    println!("file_len         {}", r.file_len);
    Ok(())
}

#[derive(Serialize)]
struct StreamSummary<'a> {
    profile: &'a str,
    tiles: usize,
    fill: &'a FillReport,
    delivered_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    preempt: Option<PreemptReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a [TraceEvent]>,
}

#[allow(clippy::too_many_arguments)]
fn stream(
    image_path: &Path,
    device_key: &Path,
    cert: &Path,
    tile_bytes: u64,
    preempt_at: Option<u64>,
    out: Option<&Path>,
    trace: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let profile = PlatformProfile::resolve(&common.profile)?;
    let image = WeightImage::read_from(image_path)?;
    let mut enclave = Enclave::from_efuse_bytes(&read(device_key)?)?;
    let app = AppIdentity::new(read(cert)?);
    if tile_bytes == 0 {
        bail!("--tile-bytes must be positive");
    }

    let mut fabric = Fabric::new(FabricLayout {
        dram_base: image.header.base_addr,
        dram_size: image.ciphertext.len().max(64) as u64,
        sram_base: DEFAULT_SRAM_BASE,
        sram_size: profile.sram_size / 64 * 64,
        sram_bw: profile.sram_bw,
    })?;
    fabric.load_dram_image(&image.dram_image())?;
    let policy = fabric.npu_only_policy();
    fabric.configure_smmu(true, policy)?;
    let mut ice = IceRegisters::new();
    enclave.unseal_and_provision(&image.blob, &app, &mut ice)?;

    let tiles = image.tiles(tile_bytes);
    let n_tiles = tiles.len();
    let mut ctx = InferenceContext::new(fabric, ice, tiles, &profile)?;
    let mut preempt = None;
    if let Some(n) = preempt_at {
        ctx.run_steps(n)?;
        if !ctx.is_complete() {
            preempt = Some(ctx.preempt()?);
            ctx.resume(&mut enclave, &image.blob, &app)?;
        }
    }
    ctx.run_to_completion()?;

    let plain_len = image.header.plaintext_len as usize;
    let delivered = &ctx.delivered_output()[..plain_len.min(ctx.delivered_output().len())];
    if let Some(path) = out {
        write(path, delivered)?;
    }
    if let Some(path) = trace {
        write(path, ctx.trace_jsonl().as_bytes())?;
    }
    let summary = StreamSummary {
        profile: &profile.name,
        tiles: n_tiles,
        fill: ctx.fill_report(),
        delivered_bytes: delivered.len(),
        preempt,
        trace: preempt_at.map(|_| ctx.trace()),
    };
    if common.json {
        return print_json(&summary);
    }
    println!("profile          {}", summary.profile);
    println!("tiles            {}", summary.tiles);
    println!("lines            {}", summary.fill.lines_processed);
    println!("bytes fetched    {}", summary.fill.bytes_fetched);
    println!("bus errors       {}", summary.fill.bus_errors.len());
    println!("delivered        {} bytes", summary.delivered_bytes);
    if let Some(p) = &summary.preempt {
        println!(
            "preempted        {:.1} ns (scrub {:.1} ns), {} lines drained, SRAM zeroed {}, keys cleared {}",
            p.duration_ns, p.scrub_ns, p.drained_lines, p.sram_zeroed, p.keys_cleared
        );
    }
    Ok(())
}

fn jitter(
    requests: u64,
    sigma_ks: f64,
    sigma_dram: f64,
    sweep: u64,
    out: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let profile = PlatformProfile::resolve(&common.profile)?;
    let first = common.seed.unwrap_or(0);
    let runs: Vec<SimStats> = (first..first + sweep.max(1))
        .map(|seed| {
            let params = JitterParams {
                sigma_ks_frac: sigma_ks,
                sigma_dram_frac: sigma_dram,
                n_requests: requests,
                seed,
            };
            simulate_jitter(&profile, &params)
        })
        .collect::<Result<_, _>>()?;
    if common.json {
        return if runs.len() == 1 {
            print_json(&runs[0])
        } else {
            print_json(&runs)
        };
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(SimStats::CSV_HEADER)?;
    for s in &runs {
        w.write_record(s.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

fn attack(scenario: &str, common: &Common) -> Result<()> {
    let profile = PlatformProfile::resolve(&common.profile)?;
    let mut bed = Testbed::new(common.seed.unwrap_or(0), profile)?;
    let verdicts: Vec<AttackVerdict> = if scenario == "all" {
        run_all(&mut bed)?
    } else {
        run_scenario(&mut bed, scenario.parse::<Scenario>()?)?
    };
    if common.json {
        print_json(&verdicts)?;
    } else {
        println!(
            "{:<20} {:<9} {:<12} {:>10}  note",
            "scenario", "variant", "verdict", "recovered"
        );
        for v in &verdicts {
            println!(
                "{:<20} {:<9} {:<12} {:>10}  {}",
                v.scenario,
                if v.variant == Variant::Defended {
                    "defended"
                } else {
                    "control"
                },
                if v.defended { "DEFENDED" } else { "BROKEN" },
                format!("{}/{}", v.evidence.lines_recovered, v.evidence.lines_examined),
                v.evidence.note
            );
        }
    }
    let failed = verdicts.iter().filter(|v| v.expect_defended && !v.defended).count();
    if failed > 0 {
        return Err(exit::Undefended(failed).into());
    }
    Ok(())
}

fn model(profile: Option<&str>, out: Option<&Path>, schedule: Option<&Path>, json: bool) -> Result<()> {
    let profiles: Vec<PlatformProfile> = match profile {
        Some(p) => vec![PlatformProfile::resolve(p)?],
        None => PlatformProfile::builtins().into_iter().map(|(_, p)| p).collect(),
    };
    let tables = model_tables(&profiles)?;
    let sched = match schedule {
        Some(path) => {
            let entries = load_tile_schedule(path)?;
            Some(serde_json::json!({
                "page_amplification": schedule_amplification(&entries, Granularity::Page)?,
                "tessera_amplification": schedule_amplification(&entries, Granularity::Tessera)?,
            }))
        }
        None => None,
    };
    if let Some(dir) = out {
        for p in emit_tables(dir, &profiles)? {
            eprintln!("wrote {}", p.display());
        }
    }
    if json {
        let mut v = serde_json::to_value(&tables)?;
        if let Some(s) = sched {
            v["schedule"] = s;
        }
        return print_json(&v);
    }
    println!("Preemption latency");
    for r in &tables.preemption {
        println!(
            "  {:<20} SRAM {:>9} B @ {:>5.0} GB/s  T_save {:.1} us  T_preempt {:.3} us ({:.1})",
            r.profile, r.sram_bytes, r.sram_bw_gbps, r.t_save_us, r.t_preempt_us, r.t_preempt_us_rounded
        );
    }
    println!("Crypto throughput (fraction of bandwidth ceiling)");
    for r in &tables.throughput {
        println!(
            "  {:<20} T_ks {:>5.1} ns  T_DRAM {:>5.1} ns  direct {:>5.1}%  tessera {:>5.1}%",
            r.profile, r.t_ks_ns, r.t_dram_ns, r.direct_pct, r.tessera_pct
        );
    }
    println!("Bandwidth amplification");
    for r in &tables.amplification {
        println!(
            "  {:<14} {:>5} B  page {:>5.2}x  tessera {:.3}x",
            r.layer, r.tile_bytes, r.page_amplification, r.tessera_amplification
        );
    }
    println!("Inference energy (ResNet-18)");
    for r in &tables.energy {
        println!(
            "  {:<8} A={:<3} DRAM {} mJ  ICE {:.2} mJ",
            r.scheme, r.amplification, r.dram_mj_display, r.ice_mj
        );
    }
    for r in &tables.ppa {
        println!(
            "Area {:.2} mm2, power {:.1} mW, {:.2e} AES blocks/s, keystream FIFO {} B",
            r.area_mm2, r.power_mw, r.aes_blocks_per_s, r.fifo_high_water_bytes
        );
    }
    if let Some(s) = sched {
        println!(
            "Schedule amplification: page {:.3}x, tessera {:.3}x",
            s["page_amplification"], s["tessera_amplification"]
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keygen { bits, out, seed, json } => keygen(bits, &out, seed, json),
        Command::Pack {
            input,
            pubkey,
            cert,
            base,
            out,
            fixed_counter,
            insecure_demo,
            seed,
            json,
        } => pack_cmd(
            &input,
            &pubkey,
            &cert,
            base,
            &out,
            fixed_counter,
            insecure_demo,
            seed,
            json,
        ),
        Command::Inspect { image, json } => report_header(&read(&image)?, json),
        Command::Simulate { what } => match what {
            Simulate::Stream {
                image,
                device_key,
                cert,
                tile_bytes,
                preempt_at,
                out,
                trace,
                common,
            } => stream(
                &image,
                &device_key,
                &cert,
                tile_bytes,
                preempt_at,
                out.as_deref(),
                trace.as_deref(),
                &common,
            ),
            Simulate::Jitter {
                requests,
                sigma_ks,
                sigma_dram,
                sweep,
                out,
                common,
            } => jitter(requests, sigma_ks, sigma_dram, sweep, out.as_deref(), &common),
        },
        Command::Attack { scenario, common } => attack(&scenario, &common),
        Command::Model {
            profile,
            out,
            schedule,
            json,
        } => model(profile.as_deref(), out.as_deref(), schedule.as_deref(), json),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
