//! Template-driven synthetic payload corpus.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::DatasetRecord;

pub const CLASSES: [&str; 5] = ["normal", "sqli", "xss", "path_traversal", "code_injection"];

/// Substrings at least one of which survives normalization in every sqli payload.
pub const SQLI_MARKERS: [&str; 6] = ["' or '", "union select", "sleep(", "drop table", " or 1=1", "'--"];

const PARAMS: [&str; 14] = [
    "id", "q", "page", "user", "name", "item", "cat", "ref", "lang", "sort", "file", "doc", "search", "view",
];
const WORDS: [&str; 24] = [
    "shoes", "blue", "winter", "coat", "garden", "table", "lamp", "book", "travel", "paris", "coffee", "green",
    "phone", "case", "music", "guitar", "red", "chair", "office", "desk", "bike", "river", "summer", "camera",
];
/// Attack-flavoured words that also show up in benign text.
const CONFUSABLE: [&str; 12] = [
    "select", "union", "script", "alert", "print", "system", "exec", "etc", "drop", "order", "from", "image",
];
const NAMES: [&str; 10] = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy"];
const TABLES: [&str; 6] = ["users", "accounts", "admin", "orders", "members", "sessions"];
const CMDS: [&str; 7] = ["ls -la", "cat /etc/hosts", "whoami", "id", "uname -a", "netstat -an", "ping -c 1 127.0.0.1"];
const FILES: [&str; 6] = ["etc/passwd", "etc/shadow", "windows/win.ini", "boot.ini", "proc/self/environ", "etc/hosts"];

fn pick<'a>(rng: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty")
}

fn ident(rng: &mut impl Rng) -> String {
    let base = pick(rng, &PARAMS);
    if rng.random_bool(0.3) {
        format!("{base}{}", rng.random_range(0..10))
    } else {
        base.to_owned()
    }
}

fn alnum(rng: &mut impl Rng, len: usize) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())] as char).collect()
}

/// Percent-encodes some special characters, occasionally twice.
fn encode_noise(rng: &mut impl Rng, s: &str) -> String {
    if !rng.random_bool(0.35) {
        return s.to_owned();
    }
    let double = rng.random_bool(0.15);
    let mut out = String::with_capacity(s.len() * 2);
    for c in s.chars() {
        if "'\"<>/() =;".contains(c) && rng.random_bool(0.5) {
            let hex = if rng.random_bool(0.5) {
                format!("{:02X}", c as u32)
            } else {
                format!("{:02x}", c as u32)
            };
            out.push_str(if double { "%25" } else { "%" });
            out.push_str(&hex);
        } else {
            out.push(c);
        }
    }
    out
}

fn benign_prefix(rng: &mut impl Rng) -> String {
    if rng.random_bool(0.5) {
        format!("{}={}&", ident(rng), rng.random_range(1..5000))
    } else {
        String::new()
    }
}

fn normal(rng: &mut impl Rng) -> String {
    let mut words: Vec<&str> = (0..rng.random_range(1..4)).map(|_| pick(rng, &WORDS)).collect();
    if rng.random_bool(0.08) {
        let at = rng.random_range(0..=words.len());
        words.insert(at, pick(rng, &CONFUSABLE));
    }
    match rng.random_range(0..6) {
        0 => format!("id={}&page={}", rng.random_range(1..100_000), rng.random_range(1..50)),
        1 => format!("{}={}", pick(rng, &["q", "search", "keywords"]), words.join("+")),
        2 => {
            let n = pick(rng, &NAMES);
            format!("user={n}&email={n}{}%40{}.com", rng.random_range(1..999), alnum(rng, 6))
        }
        3 => format!(
            "/products/{}/{}?sort={}",
            words.join("-"),
            rng.random_range(1..9999),
            pick(rng, &["asc", "desc", "price", "new"])
        ),
        4 => format!(
            "lang={}&theme={}&ref=www.{}.com%2F{}",
            pick(rng, &["en", "fr", "de", "zh", "es"]),
            words.join("_"),
            alnum(rng, 7),
            alnum(rng, 4)
        ),
        _ => format!(
            "{{\"name\":\"{}\",\"age\":{},\"note\":\"{}\"}}",
            pick(rng, &NAMES),
            rng.random_range(18..90),
            words.join(" ")
        ),
    }
}

fn sqli(rng: &mut impl Rng) -> String {
    let p = ident(rng);
    let klen = rng.random_range(1..3);
    let k = alnum(rng, klen);
    let n = rng.random_range(1..1000);
    let attack = match rng.random_range(0..6) {
        0 => format!("{p}={n}' or '{k}'='{k}"),
        1 => {
            let cols: Vec<String> = (1..rng.random_range(2..6)).map(|i| i.to_string()).collect();
            format!("{p}={n} union select {} from {}--", cols.join(","), pick(rng, &TABLES))
        }
        2 => format!("{p}={}' and sleep({})#", pick(rng, &NAMES), rng.random_range(1..10)),
        3 => format!("{p}={n}; drop table {}--", pick(rng, &TABLES)),
        4 => format!("{p}={n}' or 1=1 --"),
        _ => format!("{p}={}'-- ", pick(rng, &["admin", "root", "guest"])),
    };
    benign_prefix(rng) + &encode_noise(rng, &attack)
}

fn xss(rng: &mut impl Rng) -> String {
    let p = ident(rng);
    let n = rng.random_range(1..1000);
    let attack = match rng.random_range(0..5) {
        0 => format!("{p}=<script>alert({n})</script>"),
        1 => format!("{p}=<img src=x onerror=alert('{}')>", pick(rng, &WORDS)),
        2 => format!("{p}=\"><svg onload=confirm({n})>"),
        3 => format!("{p}=javascript:alert(document.cookie)"),
        _ => format!("{p}=<body onload=prompt({n})>"),
    };
    benign_prefix(rng) + &encode_noise(rng, &attack)
}

fn path_traversal(rng: &mut impl Rng) -> String {
    let p = ident(rng);
    let depth = rng.random_range(2..7);
    let f = pick(rng, &FILES);
    let attack = match rng.random_range(0..5) {
        0 => format!("{p}={}{f}", "../".repeat(depth)),
        1 => format!("{p}={}{f}", "..%2f".repeat(depth)),
        2 => format!("{p}={}{f}", "....//".repeat(depth)),
        3 => format!("{p}=/var/www/{}{f}", "../".repeat(depth)),
        _ => format!("{p}={}{}", "..\\".repeat(depth), f.replace('/', "\\")),
    };
    benign_prefix(rng) + &encode_noise(rng, &attack)
}

fn code_injection(rng: &mut impl Rng) -> String {
    let p = ident(rng);
    let cmd = pick(rng, &CMDS);
    let attack = match rng.random_range(0..5) {
        0 => {
            let chars: Vec<String> = (0..rng.random_range(3..8))
                .map(|_| format!("chr({})", rng.random_range(65..123)))
                .collect();
            format!("{p}=print({})", chars.join("."))
        }
        1 => format!("{p}=${{@eval(base64_decode('{}'))}}", alnum(rng, 12)),
        2 => format!("{p}=system('{cmd}')"),
        3 => format!("{p}=__import__('os').popen('{cmd}').read()"),
        _ => format!("{p}=phpinfo();exec('{cmd}')"),
    };
    benign_prefix(rng) + &encode_noise(rng, &attack)
}

/// Fraction of payloads that also carry a second class's pattern.
pub const HYBRID_RATE: f64 = 0.02;

/// `n_per_class` payloads for each of [`CLASSES`], interleaved by class.
///
/// A [`HYBRID_RATE`] share of payloads joins the labeled class's template
/// with another class's, in random order, so the corpus has a small amount
/// of irreducible ambiguity.
pub fn synth_generate(seed: u64, n_per_class: usize) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generators: [fn(&mut ChaCha8Rng) -> String; 5] = [normal, sqli, xss, path_traversal, code_injection];
    let mut out = Vec::with_capacity(n_per_class * CLASSES.len());
    for _ in 0..n_per_class {
        for (k, (label, gen)) in CLASSES.iter().zip(generators).enumerate() {
            let mut payload = gen(&mut rng);
            if rng.random_bool(HYBRID_RATE) {
                let other = (k + rng.random_range(1..CLASSES.len())) % CLASSES.len();
                let extra = generators[other](&mut rng);
                payload = if rng.random_bool(0.5) {
                    format!("{payload}&{extra}")
                } else {
                    format!("{extra}&{payload}")
                };
            }
            out.push(DatasetRecord {
                payload,
                label: (*label).to_owned(),
            });
        }
    }
    out
}
