/**
 * Filesystem timeline for one session: the commit chain with a movable
 * cursor, back/forward navigation, and the tree as of any cursor.
 *
 * Every tree shown is exactly the `tree` of a commit fetched from the read
 * API, and file bytes come from /blobs by the digest that tree names — the
 * timeline never invents paths, digests, or content. The cursor is clamped
 * to [0, history length), so no out-of-range commit is ever requested.
 */
import type { MonitorApi } from "./api.js";
import type { CommitDoc } from "./types.js";

export interface TreeEntry {
  path: string;
  digest: string;
}

export interface TreeDiff {
  added: Set<string>;
  modified: Set<string>;
  deleted: Set<string>;
}

export function diffTrees(
  parent: Record<string, string>,
  child: Record<string, string>,
): TreeDiff {
  const added = new Set<string>();
  const modified = new Set<string>();
  const deleted = new Set<string>();
  for (const [path, digest] of Object.entries(child)) {
    if (!(path in parent)) added.add(path);
    else if (parent[path] !== digest) modified.add(path);
  }
  for (const path of Object.keys(parent)) {
    if (!(path in child)) deleted.add(path);
  }
  return { added, modified, deleted };
}

export class Timeline {
  private commits: CommitDoc[] = [];
  private cursorIndex = 0;

  constructor(
    private readonly api: MonitorApi,
    readonly sessionId: string,
  ) {}

  /** Fetch the commit chain; the cursor starts at the newest commit. */
  async load(): Promise<void> {
    const history = await this.api.history(this.sessionId);
    this.commits = history.commits;
    this.cursorIndex = Math.max(0, this.commits.length - 1);
  }

  get length(): number {
    return this.commits.length;
  }

  get cursor(): number {
    return this.cursorIndex;
  }

  /** Clamp into the valid range; out-of-range requests cannot happen. */
  setCursor(index: number): number {
    const top = Math.max(0, this.commits.length - 1);
    this.cursorIndex = Math.min(Math.max(index, 0), top);
    return this.cursorIndex;
  }

  /** One step older; a no-op at the baseline. */
  back(): number {
    return this.setCursor(this.cursorIndex - 1);
  }

  /** One step newer; a no-op at the head. */
  forward(): number {
    return this.setCursor(this.cursorIndex + 1);
  }

  commitAt(index: number): CommitDoc {
    const commit = this.commits[index];
    if (commit === undefined) {
      throw new RangeError(
        `commit index ${index} outside history of ${this.commits.length}`,
      );
    }
    return commit;
  }

  get commit(): CommitDoc {
    return this.commitAt(this.cursorIndex);
  }

  /** The tree at a cursor, as sorted path/digest entries. */
  treeAt(index: number): TreeEntry[] {
    return Object.entries(this.commitAt(index).tree)
      .map(([path, digest]) => ({ path, digest }))
      .sort((a, b) => (a.path < b.path ? -1 : a.path > b.path ? 1 : 0));
  }

  tree(): TreeEntry[] {
    return this.treeAt(this.cursorIndex);
  }

  /** Changes the cursor's commit introduced over the one before it. */
  diffAt(index: number): TreeDiff {
    const child = this.commitAt(index);
    const parent = index > 0 ? this.commitAt(index - 1).tree : {};
    return diffTrees(parent, child.tree);
  }

  diff(): TreeDiff {
    return this.diffAt(this.cursorIndex);
  }

  /**
   * File bytes as of a cursor. Works for any commit in the chain, which is
   * what lets an analyst pull a binary from before its self-delete.
   */
  async fileAt(index: number, path: string): Promise<Uint8Array> {
    const digest = this.commitAt(index).tree[path];
    if (digest === undefined) {
      throw new Error(`${path} does not exist at commit ${index}`);
    }
    return this.api.blob(digest);
  }
}
