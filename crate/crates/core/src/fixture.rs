//! Seeded generator for small synthetic movie-recommendation corpora.
//!
//! Every movie has one genre, two actors, one director, one country and one
//! decade. In each dialogue the seeker names a genre and two actors of a
//! target movie; the recommender suggests it, the seeker asks about its
//! director, and the recommender follows up with another movie by the same
//! director (or, failing that, of the same genre). A closing recommender turn
//! carries no item.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{self, Dialogue, Speaker, Utterance};
use crate::error::Result;
use crate::kg::KnowledgeGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub dialogues: usize,
    pub movies: usize,
    pub genres: usize,
    pub actors: usize,
    pub directors: usize,
    pub countries: usize,
    pub decades: usize,
    pub seed: u64,
    /// Target movie of dialogue `i` is `i mod movies` instead of random.
    pub cycle_targets: bool,
}

impl Default for FixtureSpec {
    /// 50 dialogues over a 100-entity graph with 30 movies.
    fn default() -> Self {
        Self {
            dialogues: 50,
            movies: 30,
            genres: 6,
            actors: 40,
            directors: 12,
            countries: 6,
            decades: 6,
            seed: 2024,
            cycle_targets: false,
        }
    }
}

impl FixtureSpec {
    pub fn num_entities(&self) -> usize {
        self.movies + self.genres + self.actors + self.directors + self.countries + self.decades
    }
}

#[derive(Clone, Debug)]
struct Movie {
    name: String,
    genre: usize,
    actors: [usize; 2],
    director: usize,
    country: usize,
    decade: usize,
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub triples: Vec<(String, String, String)>,
    pub items: Vec<String>,
    pub dialogues: Vec<Dialogue>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pronounceable names, capitalised.
fn names(rng: &mut ChaCha8Rng, n: usize, syllables: usize, taken: &mut Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut s = String::new();
        for _ in 0..syllables {
            s.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            s.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        let mut c = s.chars();
        let name = c.next().unwrap().to_uppercase().collect::<String>() + c.as_str();
        if !taken.contains(&name) {
            taken.push(name.clone());
            out.push(name);
        }
    }
    out
}

/// Assigns `slots` values from `0..pool`, using every value at least once
/// when `slots >= pool`.
fn cover(rng: &mut ChaCha8Rng, slots: usize, pool: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..slots).map(|i| if i < pool { i } else { rng.gen_range(0..pool) }).collect();
    v.shuffle(rng);
    v
}

pub fn generate(spec: &FixtureSpec) -> Fixture {
    assert!(spec.movies >= 2 && spec.actors >= 2 && spec.genres >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = Vec::new();
    let movie_names = names(&mut rng, spec.movies, 3, &mut taken);
    let firsts = names(&mut rng, spec.actors, 2, &mut taken);
    let lasts = names(&mut rng, spec.actors, 3, &mut taken);
    let actors: Vec<String> = firsts.iter().zip(&lasts).map(|(f, l)| format!("{f} {l}")).collect();
    let directors = names(&mut rng, spec.directors, 2, &mut taken);
    let genres: Vec<String> = (0..spec.genres).map(|i| format!("genre{i}")).collect();
    let countries = names(&mut rng, spec.countries, 2, &mut taken);
    let decades: Vec<String> = (0..spec.decades).map(|i| format!("{}s", 1950 + 10 * i)).collect();

    let genre_of = cover(&mut rng, spec.movies, spec.genres);
    let director_of = cover(&mut rng, spec.movies, spec.directors);
    let country_of = cover(&mut rng, spec.movies, spec.countries);
    let decade_of = cover(&mut rng, spec.movies, spec.decades);
    let actor_slots = cover(&mut rng, spec.movies * 2, spec.actors);
    let movies: Vec<Movie> = (0..spec.movies)
        .map(|i| {
            let a = actor_slots[2 * i];
            let mut b = actor_slots[2 * i + 1];
            if b == a {
                b = (a + 1) % spec.actors;
            }
            Movie {
                name: movie_names[i].clone(),
                genre: genre_of[i],
                actors: [a, b],
                director: director_of[i],
                country: country_of[i],
                decade: decade_of[i],
            }
        })
        .collect();

    let mut triples = Vec::new();
    for m in &movies {
        triples.push((m.name.clone(), "genre".into(), genres[m.genre].clone()));
        for &a in &m.actors {
            triples.push((m.name.clone(), "starring".into(), actors[a].clone()));
        }
        triples.push((m.name.clone(), "directed by".into(), directors[m.director].clone()));
        triples.push((m.name.clone(), "country".into(), countries[m.country].clone()));
        triples.push((m.name.clone(), "released in".into(), decades[m.decade].clone()));
    }

    let follow_up = |t: usize| -> usize {
        let m = &movies[t];
        (0..movies.len())
            .find(|&j| j != t && movies[j].director == m.director)
            .or_else(|| (0..movies.len()).find(|&j| j != t && movies[j].genre == m.genre))
            .unwrap_or((t + 1) % movies.len())
    };

    let greetings = ["Hi!", "Hello there.", "Hey, good evening.", "Hi, I need some help."];
    let closings = ["Enjoy your evening!", "Have fun watching!", "You are welcome, bye!"];
    let dialogues = (0..spec.dialogues)
        .map(|i| {
            let t = if spec.cycle_targets { i % spec.movies } else { rng.gen_range(0..spec.movies) };
            let m = &movies[t];
            let f = &movies[follow_up(t)];
            let (g, a0, a1, dir) = (&genres[m.genre], &actors[m.actors[0]], &actors[m.actors[1]], &directors[m.director]);
            let greet = greetings[rng.gen_range(0..greetings.len())];
            let close = closings[rng.gen_range(0..closings.len())];
            let u = |speaker, text: String, entities: Vec<&String>, items: Vec<&String>| Utterance {
                speaker,
                text,
                entities: entities.into_iter().cloned().collect(),
                items: items.into_iter().cloned().collect(),
            };
            Dialogue {
                id: format!("syn{i:04}"),
                utterances: vec![
                    u(
                        Speaker::Seeker,
                        format!("{greet} I want a {g} movie, maybe with {a0} or {a1}."),
                        vec![g, a0, a1],
                        vec![],
                    ),
                    u(
                        Speaker::Recommender,
                        format!("You should watch {}. It is a {g} film starring {a0}.", m.name),
                        vec![g, a0],
                        vec![&m.name],
                    ),
                    u(
                        Speaker::Seeker,
                        format!("I loved it. Anything else by {dir}?"),
                        vec![dir],
                        vec![],
                    ),
                    u(
                        Speaker::Recommender,
                        format!("Then try {}, it is another one I like.", f.name),
                        vec![],
                        vec![&f.name],
                    ),
                    u(Speaker::Seeker, "Thanks a lot!".into(), vec![], vec![]),
                    u(Speaker::Recommender, close.into(), vec![], vec![]),
                ],
            }
        })
        .collect();

    Fixture {
        spec: spec.clone(),
        triples,
        items: movies.iter().map(|m| m.name.clone()).collect(),
        dialogues,
    }
}

impl Fixture {
    pub fn triples_tsv(&self) -> String {
        let mut s = String::new();
        for (h, r, t) in &self.triples {
            let _ = writeln!(s, "{h}\t{r}\t{t}");
        }
        s
    }

    pub fn graph(&self, inverse_edges: bool) -> Result<KnowledgeGraph> {
        KnowledgeGraph::parse_triples(&self.triples_tsv(), "fixture", inverse_edges)?
            .register_items(&self.items)
    }

    /// Writes `kg.tsv`, `items.txt` and `dialogues.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("kg.tsv"), self.triples_tsv())?;
        fs::write(dir.join("items.txt"), self.items.join("\n") + "\n")?;
        corpus::write_dialogues(&dir.join("dialogues.jsonl"), &self.dialogues)?;
        Ok(())
    }
}

/// Small model and training budget sized for the fixture corpora.
pub const TOY_CONFIG: &str = r#"
[encoder]
d_text = 16
d_ent = 16
text_layers = 1
text_heads = 2
text_ffn = 32
max_len = 128
rgcn_bases = 4

[model]
d = 16
decoder_width = 16
decoder_layers = 1
decoder_heads = 2
decoder_ffn = 32
decoder_max_len = 160
max_new_tokens = 8
rec_response_source = "gold"

[train]
backbone_pretrain_steps = 200
backbone_lr = 0.01
stage1_max_epochs = 1
stage1_lr = 0.005
stage2_lr = 0.01
stage2_max_steps = 200
stage2_max_epochs = 0
rec_batch = 64
patience = 0
early_stop_metric = "recall@1"
"#;

pub fn toy_config() -> RunConfig {
    RunConfig::from_toml(TOY_CONFIG).expect("toy config parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fixture_has_stated_sizes() {
        let f = generate(&FixtureSpec::default());
        let g = f.graph(true).unwrap();
        assert_eq!(g.num_entities(), 100);
        assert_eq!(g.num_items(), 30);
        assert_eq!(f.dialogues.len(), 50);
        for d in &f.dialogues {
            d.validate().unwrap();
        }
    }

    #[test]
    fn toy_config_validates() {
        toy_config().validate().unwrap();
    }

    #[test]
    fn deterministic() {
        let a = generate(&FixtureSpec::default());
        let b = generate(&FixtureSpec::default());
        assert_eq!(a.triples, b.triples);
        assert_eq!(a.dialogues, b.dialogues);
    }
}
